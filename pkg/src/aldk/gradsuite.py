"""Finite-difference suite over every differentiable operation.

Each case builds a small random problem from a seed and returns an
:class:`FDReport`.  The suite is what ``aldk gradcheck`` runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .deformation import resample, warp
from .engine import Tensor, conv3d, fd_check, mul, relu, sigmoid, sum as tsum, tconv3d
from .losses import adv_loss, corrcoef, critic_loss, dis_loss, gradient_penalty, rec_loss
from .networks import DiscriminatorConfig, StudentConfig, discriminator_forward, init_discriminator, init_student, student_forward

TOY_DISC = DiscriminatorConfig(size=8, base_channels=4, layers=3)
# the penalty involves the critic's input gradient, which jumps when a relu
# flips, so checks through it use a smaller probe step
PENALTY_H = 1e-6


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    return tsum(mul(out, Tensor(rng.standard_normal(out.shape))))


def _kink_free_field(rng, d: int) -> np.ndarray:
    """Field whose sample points avoid voxel faces, so warp is smooth under +-h."""
    base = np.indices((d, d, d))
    u = np.empty((3, d, d, d))
    for chan, axis in ((0, 2), (1, 1), (2, 0)):
        cell = np.clip(base[axis] + rng.integers(-1, 2, (d, d, d)), 0, d - 2)
        u[chan] = cell + rng.uniform(0.2, 0.8, (d, d, d)) - base[axis]
    return u


def _toy_theta(rng) -> dict:
    theta = init_discriminator(TOY_DISC, int(rng.integers(2 ** 32)))
    for name, p in theta.items():
        if name.endswith("bias"):
            p.data = rng.normal(0, 0.1, p.shape).astype(p.data.dtype)
    return theta


def _over_theta(theta, loss):
    names = list(theta)
    return (lambda *a: loss(dict(zip(names, a)))), [theta[n].data for n in names]


def case_conv3d(rng):
    x, k, b = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((3, 2, 4, 4, 4)), rng.standard_normal(3)
    return fd_check(lambda x, k, b: _project(conv3d(x, k, b, 2), np.random.default_rng(1)), [x, k, b],
                    max_coords=48, rng=rng)


def case_tconv3d(rng):
    y, k, b = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal((3, 2, 4, 4, 4)), rng.standard_normal(2)
    return fd_check(lambda y, k, b: _project(tconv3d(y, k, b, 2), np.random.default_rng(1)), [y, k, b],
                    max_coords=48, rng=rng)


def case_activations(rng):
    x = rng.uniform(0.05, 2.0, 40) * rng.choice([-1, 1], 40)
    return fd_check(lambda x: _project(mul(relu(x), sigmoid(x)), np.random.default_rng(1)), [x], max_coords=None,
                    rng=rng)


def case_warp(rng):
    img, u = rng.random((1, 6, 6, 6)), _kink_free_field(rng, 6)
    return fd_check(lambda a, b: _project(warp(a, b), np.random.default_rng(1)), [img, u], max_coords=48, rng=rng)


def case_resample(rng):
    return fd_check(lambda x: _project(resample(x, 8), np.random.default_rng(1)), [rng.standard_normal((1, 3, 4, 4, 4))],
                    max_coords=48, rng=rng)


def case_rec_loss(rng):
    return fd_check(rec_loss, [rng.random((2, 1, 8, 8, 8)), rng.random((2, 1, 8, 8, 8))], max_coords=32, rng=rng)


def case_corrcoef(rng):
    return fd_check(lambda a, b: tsum(corrcoef(a, b)), [rng.random((1, 6, 6, 6)), rng.random((1, 6, 6, 6))],
                    max_coords=32, rng=rng)


def case_adv_loss(rng):
    return fd_check(lambda a, b: adv_loss(a, b, 0.5), [rng.random(()), rng.random(())], max_coords=None, rng=rng)


def case_discriminator(rng):
    theta = init_discriminator(DiscriminatorConfig(), int(rng.integers(2 ** 32)))
    return fd_check(lambda f: discriminator_forward(f, theta), [rng.normal(0, 2, (3, 8, 8, 8))], max_coords=16, rng=rng)


def case_student(rng):
    cfg = StudentConfig(base_channels=4)
    params = init_student(cfg, int(rng.integers(2 ** 32)))
    mv, fx = rng.random((1, 16, 16, 16)), rng.random((1, 16, 16, 16))
    names = ["enc1.kernel", "dec1.kernel", "flow.kernel", "flow.bias"]

    def f(*arrays):
        return _project(student_forward(mv, fx, {**params, **dict(zip(names, arrays))}, cfg), np.random.default_rng(1))

    return fd_check(f, [params[n].data for n in names], max_coords=8, rng=rng)


def case_dis_loss(rng):
    theta = _toy_theta(rng)
    t = rng.normal(0, 1, (1, 3, 8, 8, 8))
    return fd_check(lambda s: dis_loss(s, t, theta, 0.1, 1.0, TOY_DISC), [rng.normal(0, 1, t.shape)],
                    h=PENALTY_H, max_coords=24, rng=rng)


def case_critic_loss(rng):
    s, t = rng.normal(0, 1, (2, 3, 8, 8, 8)), rng.normal(0, 1, (2, 3, 8, 8, 8))
    f, point = _over_theta(_toy_theta(rng), lambda th: critic_loss(s, t, th, 0.1, 1.0, TOY_DISC))
    return fd_check(f, point, h=PENALTY_H, max_coords=8, rng=rng)


def case_penalty_theta(rng):
    phi = rng.normal(0, 1, (2, 3, 8, 8, 8))
    f, point = _over_theta(_toy_theta(rng), lambda th: gradient_penalty(phi, th, TOY_DISC))
    return fd_check(f, point, h=PENALTY_H, max_coords=8, rng=rng)


CASES = {
    "conv3d": case_conv3d,
    "tconv3d": case_tconv3d,
    "relu_sigmoid": case_activations,
    "warp": case_warp,
    "resample": case_resample,
    "corrcoef": case_corrcoef,
    "rec_loss": case_rec_loss,
    "adv_loss": case_adv_loss,
    "discriminator": case_discriminator,
    "student": case_student,
    "dis_loss": case_dis_loss,
    "critic_loss": case_critic_loss,
    "penalty_wrt_theta": case_penalty_theta,
}


@dataclass
class CaseResult:
    name: str
    seed: int
    max_error: float
    passed: bool
    seconds: float


def run_suite(seeds=range(5), names=None, tol: float = 1e-2) -> list[CaseResult]:
    results = []
    for name in names or CASES:
        for seed in seeds:
            t0 = time.perf_counter()
            rep = CASES[name](np.random.default_rng(seed))
            rep.tol = tol
            results.append(CaseResult(name, seed, rep.max_error, rep.passed, time.perf_counter() - t0))
    return results
