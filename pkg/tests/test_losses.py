import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from aldk.engine import Parameter, Tensor, fd_check, grad, mean, mul, sum as tsum
from aldk.losses import (DegenerateImageError, LossWeights, adv_loss, corrcoef, covariance, critic_loss,
                         critic_penalty, dis_loss, feature_term, gradient_penalty, joint_deformation, rec_loss)
from aldk.networks import DiscriminatorConfig, init_discriminator

TOY = DiscriminatorConfig(size=8, base_channels=4, layers=3)
SEEDS = range(5)
# The penalty depends on the critic's input gradient, which jumps whenever a
# relu flips; penalty checks therefore probe with a small step.
PENALTY_H = 1e-6


def vol(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)


def toy_theta(seed):
    theta = init_discriminator(TOY, seed)
    rng = np.random.default_rng(seed)
    for name, p in theta.items():  # non-zero biases exercise every gradient path
        if name.endswith("bias"):
            p.data = rng.normal(0, 0.1, p.shape).astype(p.data.dtype)
    return theta


def theta_fn(theta, loss):
    """Wrap ``loss(theta)`` as a function of the raw parameter arrays."""
    names = list(theta)

    def f(*arrays):
        return loss(dict(zip(names, arrays)))

    return f, [theta[n].data for n in names]


class TestCovariance:
    def test_constant_is_zero(self):
        assert covariance(vol([2, 2, 2]), vol([0, 1, 5])).item() == 0.0

    def test_two_voxel_example(self):
        assert covariance(vol([0, 1]), vol([0, 1])).item() == pytest.approx(0.25, abs=1e-7)

    def test_symmetric(self, rng):
        a, b = rng.random((1, 6, 6, 6)), rng.random((1, 6, 6, 6))
        assert covariance(a, b).item() == covariance(b, a).item()

    def test_per_sample(self, rng):
        a = rng.random((3, 1, 4, 4, 4))
        out = covariance(a, a).data
        np.testing.assert_allclose(out, a.reshape(3, -1).var(axis=1), rtol=1e-4)


class TestCorrcoef:
    def test_self_is_one(self, rng):
        a = rng.random((1, 8, 8, 8))
        assert corrcoef(a, a).item() == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("scale,sign", [(2.5, 1.0), (0.3, 1.0), (-1.7, -1.0), (-4.0, -1.0)])
    def test_affine_invariance(self, rng, scale, sign):
        a = rng.random((1, 8, 8, 8))
        assert corrcoef(scale * a + 0.7, a).item() == pytest.approx(sign, abs=1e-5)

    def test_four_voxel_example(self):
        expected = np.corrcoef([0, 1, 2, 3], [0, 1, 2, 5])[0, 1]  # 0.95618...
        assert corrcoef(vol([0, 1, 2, 3]), vol([0, 1, 2, 5])).item() == pytest.approx(expected, abs=1e-6)

    def test_constant_rejected(self, rng):
        with pytest.raises(DegenerateImageError):
            corrcoef(np.full((1, 4, 4, 4), 0.3), rng.random((1, 4, 4, 4)))

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 27), elements=st.floats(-10, 10, allow_nan=False)))
    def test_in_unit_range(self, pair):
        a, b = pair
        if np.ptp(a) < 1e-3 or np.ptp(b) < 1e-3:
            return
        r = corrcoef(a.reshape(1, 3, 3, 3), b.reshape(1, 3, 3, 3)).item()
        assert -1.0 - 1e-5 <= r <= 1.0 + 1e-5


class TestRecLoss:
    def test_identical_is_zero(self, rng):
        a = rng.random((1, 8, 8, 8))
        assert rec_loss(a, a).item() == pytest.approx(0.0, abs=1e-6)

    def test_negated_is_two(self, rng):
        a = rng.random((1, 8, 8, 8))
        assert rec_loss(-a, a).item() == pytest.approx(2.0, abs=1e-6)

    def test_four_voxel_example(self):
        expected = 1 - np.corrcoef([0, 1, 2, 3], [0, 1, 2, 5])[0, 1]  # 0.04382...
        assert rec_loss(vol([0, 1, 2, 3]), vol([0, 1, 2, 5])).item() == pytest.approx(expected, abs=1e-6)

    def test_batch_mean(self, rng):
        a, b = rng.random((3, 1, 4, 4, 4)), rng.random((3, 1, 4, 4, 4))
        each = [rec_loss(a[i], b[i]).item() for i in range(3)]
        assert rec_loss(a, b).item() == pytest.approx(np.mean(each), rel=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 1, 8, 8, 8)), rng.random((2, 1, 8, 8, 8))
        rep = fd_check(rec_loss, [a, b], max_coords=40, rng=rng)
        assert rep.passed, rep.errors


class TestJointDeformation:
    def test_endpoints(self, rng):
        t, s = rng.random((3, 4, 4, 4)), rng.random((3, 4, 4, 4))
        np.testing.assert_array_equal(joint_deformation(t, s, 0.0).data, s.astype(np.float32))
        np.testing.assert_array_equal(joint_deformation(t, s, 1.0).data, t.astype(np.float32))

    def test_mix_of_constants(self):
        out = joint_deformation(np.ones((3, 4, 4, 4)), np.zeros((3, 4, 4, 4)), 0.1).data
        np.testing.assert_allclose(out, 0.1, rtol=1e-6)

    def test_linear_in_beta(self, rng):
        t, s = rng.random((3, 4, 4, 4)), rng.random((3, 4, 4, 4))
        a, b, c = (joint_deformation(t, s, beta).data for beta in (0.2, 0.5, 0.8))
        np.testing.assert_allclose(b, (a + c) / 2, atol=1e-6)


class TestGradientPenalty:
    @pytest.mark.parametrize("shape", [(1, 3, 4, 4, 4), (2, 3, 8, 8, 8)])
    def test_mean_critic(self, rng, shape):
        n = np.prod(shape[1:])
        pen = critic_penalty(lambda f: mean(f, axis=(1, 2, 3, 4)), rng.random(shape))
        assert pen.item() == pytest.approx((1 / np.sqrt(n) - 1) ** 2, rel=1e-5)

    def test_unit_norm_critic(self, rng):
        v = rng.standard_normal((1, 3, 4, 4, 4))
        v /= np.linalg.norm(v)
        pen = critic_penalty(lambda f: tsum(mul(f, Tensor(v)), axis=(1, 2, 3, 4)), rng.random(v.shape))
        assert pen.item() == pytest.approx(0.0, abs=1e-6)

    def test_per_sample(self, rng):
        theta = toy_theta(0)
        phi = rng.normal(0, 1, (2, 3, 8, 8, 8))
        per = gradient_penalty(phi, theta, TOY, per_sample=True).data
        single = [gradient_penalty(phi[i], theta, TOY).item() for i in range(2)]
        np.testing.assert_allclose(per, single, rtol=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_wrt_theta(self, seed):
        rng = np.random.default_rng(seed)
        phi = rng.normal(0, 1, (2, 3, 8, 8, 8))
        f, point = theta_fn(toy_theta(seed), lambda th: gradient_penalty(phi, th, TOY))
        rep = fd_check(f, point, h=PENALTY_H, max_coords=12, rng=rng)
        assert rep.passed, rep.errors

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_at_default_size(self, seed):
        rng = np.random.default_rng(seed)
        phi = rng.normal(0, 1, (1, 3, 16, 16, 16))
        theta = init_discriminator(DiscriminatorConfig(), seed)
        names = ["d1.kernel", "d3.kernel", "d5.kernel"]

        def f(*arrays):
            return gradient_penalty(phi, {**theta, **dict(zip(names, arrays))})

        rep = fd_check(f, [theta[n].data for n in names], h=PENALTY_H, max_coords=6, rng=rng)
        assert rep.passed, rep.errors


class TestDisLoss:
    def test_identical_fields_no_penalty(self, rng):
        phi = rng.normal(0, 1, (3, 8, 8, 8))
        assert dis_loss(phi, phi, toy_theta(0), 0.1, 0.0, TOY).item() == 0.0

    def test_lambda_zero_is_feature_term(self, rng):
        s, t = rng.normal(0, 1, (2, 3, 8, 8, 8)), rng.normal(0, 1, (2, 3, 8, 8, 8))
        theta = toy_theta(1)
        assert dis_loss(s, t, theta, 0.1, 0.0, TOY).item() == feature_term(s, t, theta, TOY).item()

    def test_term_wise(self, rng):
        s, t = rng.normal(0, 1, (2, 3, 8, 8, 8)), rng.normal(0, 1, (2, 3, 8, 8, 8))
        theta = toy_theta(2)
        from aldk.networks import discriminator_forward
        ds = discriminator_forward(s, theta, TOY).data.astype(np.float64)
        dt = discriminator_forward(t, theta, TOY).data.astype(np.float64)
        feat = np.mean((ds - dt) ** 2)
        pen = gradient_penalty(0.1 * t + 0.9 * s, theta, TOY).item()
        assert dis_loss(s, t, theta, 0.1, 2.0, TOY).item() == pytest.approx(feat + 2.0 * pen, rel=1e-5)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_wrt_student_field(self, seed):
        rng = np.random.default_rng(seed)
        theta = toy_theta(seed)
        t = rng.normal(0, 1, (1, 3, 16, 16, 16))
        rep = fd_check(lambda s: dis_loss(s, t, theta, 0.1, 1.0, TOY), [rng.normal(0, 1, t.shape)],
                       h=PENALTY_H, max_coords=24, rng=rng)
        assert rep.passed, rep.errors


class TestAdvLoss:
    def test_endpoints(self):
        assert adv_loss(0.2, 0.4, 1.0).item() == pytest.approx(0.2)
        assert adv_loss(0.2, 0.4, 0.0).item() == pytest.approx(0.4)

    def test_default_mix(self):
        assert adv_loss(0.2, 0.4, 0.5).item() == pytest.approx(0.3, abs=1e-7)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 5), st.floats(0, 5), st.floats(0.01, 1))
    def test_monotone(self, gamma, a, b, delta):
        base = adv_loss(a, b, gamma).item()
        assert adv_loss(a + delta, b, gamma).item() >= base - 1e-6
        assert adv_loss(a, b + delta, gamma).item() >= base - 1e-6

    def test_gamma_validated(self):
        with pytest.raises(ValueError):
            adv_loss(0.1, 0.1, 1.5)

    def test_pure_reconstruction_ignores_theta(self, rng):
        theta = toy_theta(0)
        s, t = rng.normal(0, 1, (3, 8, 8, 8)), rng.normal(0, 1, (3, 8, 8, 8))
        loss = adv_loss(Tensor(0.3), feature_term(s, t, theta, TOY), 1.0)
        for g in grad(loss, list(theta.values())):
            assert g is None or not g.data.any()


class TestCriticLoss:
    def test_identical_fields_leave_penalty(self, rng):
        phi = rng.normal(0, 1, (3, 8, 8, 8))
        theta = toy_theta(0)
        expected = 1.5 * gradient_penalty(phi, theta, TOY).item()
        assert critic_loss(phi, phi, theta, 0.1, 1.5, TOY).item() == pytest.approx(expected, rel=1e-5)

    def test_lambda_zero_negates_feature_term(self, rng):
        s, t = rng.normal(0, 1, (3, 8, 8, 8)), rng.normal(0, 1, (3, 8, 8, 8))
        theta = toy_theta(3)
        assert critic_loss(s, t, theta, 0.1, 0.0, TOY).item() == -feature_term(s, t, theta, TOY).item()

    def test_no_gradient_to_student(self, rng):
        w = Parameter("w", rng.normal(0, 1, (3, 8, 8, 8)))
        phi_s = mul(w, 2.0)
        loss = critic_loss(phi_s, rng.normal(0, 1, (3, 8, 8, 8)), toy_theta(0), 0.1, 1.0, TOY)
        (g,) = grad(loss, [w])
        assert g is None or not g.data.any()

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_wrt_theta(self, seed):
        rng = np.random.default_rng(seed)
        s, t = rng.normal(0, 1, (2, 3, 8, 8, 8)), rng.normal(0, 1, (2, 3, 8, 8, 8))
        f, point = theta_fn(toy_theta(seed), lambda th: critic_loss(s, t, th, 0.1, 1.0, TOY))
        rep = fd_check(f, point, h=PENALTY_H, max_coords=12, rng=rng)
        assert rep.passed, rep.errors


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.gamma, w.beta, w.lam) == (0.5, 0.1, 1.0)

    @pytest.mark.parametrize("kw", [{"gamma": -0.1}, {"gamma": 1.1}, {"beta": 2.0}, {"lam": -1.0}])
    def test_rejects_out_of_range(self, kw):
        with pytest.raises(ValueError):
            LossWeights(**kw)
