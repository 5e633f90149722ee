"""Reconstruction, discrimination, adversarial and critic losses.

All image losses work per sample on [N,1,D,H,W] (or a single [1,D,H,W])
and average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .engine import EngineError, Tensor, as_tensor, input_gradient, mean, ops, sqrt
from .networks import DiscriminatorConfig, ParamSet, discriminator_forward


class DegenerateImageError(ValueError):
    """Correlation is undefined for a constant image."""


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.5
    beta: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0,1], got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0,1], got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def _per_sample(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 4:
        x = ops.reshape(x, (1,) + x.shape)
    return ops.reshape(x, (x.shape[0], -1))


def covariance(a, b) -> Tensor:
    """mean((a - mean a) * (b - mean b)) per sample, shape [N].

    Centering first equals mean(a*b) - mean(a)*mean(b) but avoids float32
    cancellation when an offset dwarfs the spread.
    """
    a, b = _per_sample(a), _per_sample(b)
    if a.shape != b.shape:
        raise EngineError(f"covariance extent mismatch: {a.shape} vs {b.shape}")
    if a.shape[1] < 2:
        raise EngineError("covariance needs at least two voxels")
    da = ops.sub(a, mean(a, axis=1, keepdims=True))
    db = da if b is a else ops.sub(b, mean(b, axis=1, keepdims=True))
    return mean(ops.mul(da, db), axis=1)


def corrcoef(a, b) -> Tensor:
    """Pearson correlation per sample, shape [N]."""
    cab = covariance(a, b)
    caa = covariance(a, a)
    cbb = covariance(b, b)
    if (caa.data <= 0).any() or (cbb.data <= 0).any():
        raise DegenerateImageError("correlation of a constant image is undefined")
    return ops.div(cab, sqrt(ops.mul(caa, cbb)))


def rec_loss(warped, fixed) -> Tensor:
    """Batch mean of 1 - corrcoef(warped, fixed)."""
    return mean(ops.sub(1.0, corrcoef(warped, fixed)))


def joint_deformation(phi_t, phi_s, beta: float) -> Tensor:
    phi_t, phi_s = as_tensor(phi_t), as_tensor(phi_s)
    if phi_t.shape != phi_s.shape:
        raise EngineError(f"joint deformation extent mismatch: {phi_t.shape} vs {phi_s.shape}")
    return ops.add(ops.scale(phi_t, beta), ops.scale(phi_s, 1.0 - beta))


def critic_penalty(critic, phi_hat, per_sample: bool = False) -> Tensor:
    """(||d critic(phi_hat) / d phi_hat|| - 1)^2 for any per-sample critic [N].

    If ``phi_hat`` does not already require grad it is promoted to a leaf that
    does.  The result stays differentiable with respect to whatever the
    critic closes over.
    """
    phi_hat = as_tensor(phi_hat)
    if not phi_hat.requires_grad:
        phi_hat = Tensor(phi_hat.data, requires_grad=True)
    g = input_gradient(ops.sum(critic(phi_hat)), phi_hat)
    if g.ndim == 4:
        g = ops.reshape(g, (1,) + g.shape)
    norms = sqrt(ops.add(ops.sum(ops.mul(g, g), axis=tuple(range(1, g.ndim))), 1e-12))
    pen = ops.mul(ops.sub(norms, 1.0), ops.sub(norms, 1.0))
    return pen if per_sample else mean(pen)


def gradient_penalty(phi_hat, theta: ParamSet, dconfig: DiscriminatorConfig = DiscriminatorConfig(),
                     per_sample: bool = False) -> Tensor:
    """Penalty of the discriminator's input-gradient norm at ``phi_hat``; differentiable in theta."""
    return critic_penalty(lambda f: discriminator_forward(f, theta, dconfig), phi_hat, per_sample)


def feature_term(phi_s, phi_t, theta: ParamSet, dconfig: DiscriminatorConfig = DiscriminatorConfig()) -> Tensor:
    """Batch mean of (D(phi_s) - D(phi_t))^2."""
    diff = ops.sub(discriminator_forward(phi_s, theta, dconfig), discriminator_forward(phi_t, theta, dconfig))
    return mean(ops.mul(diff, diff))


def dis_loss(phi_s, phi_t, theta: ParamSet, beta: float, lam: float,
             dconfig: DiscriminatorConfig = DiscriminatorConfig()) -> Tensor:
    """Feature matching term plus lambda times the penalty at the joint field."""
    feat = feature_term(phi_s, phi_t, theta, dconfig)
    if lam == 0:
        return feat
    pen = gradient_penalty(joint_deformation(phi_t, phi_s, beta), theta, dconfig)
    return ops.add(feat, ops.scale(pen, lam))


def adv_loss(l_rec, l_dis, gamma: float) -> Tensor:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0,1], got {gamma}")
    return ops.add(ops.scale(as_tensor(l_rec), gamma), ops.scale(as_tensor(l_dis), 1.0 - gamma))


def critic_loss(phi_s, phi_t, theta: ParamSet, beta: float, lam: float,
                dconfig: DiscriminatorConfig = DiscriminatorConfig()) -> Tensor:
    """-(D(phi_s) - D(phi_t))^2 + lambda * penalty, with phi_s detached."""
    phi_s = as_tensor(phi_s).detach()
    phi_t = as_tensor(phi_t).detach()
    loss = ops.neg(feature_term(phi_s, phi_t, theta, dconfig))
    if lam != 0:
        pen = gradient_penalty(joint_deformation(phi_t, phi_s, beta), theta, dconfig)
        loss = ops.add(loss, ops.scale(pen, lam))
    return loss
