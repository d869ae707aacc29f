"""Tests for the reverse-mode engine: op-level gradient checks against a
finite-difference oracle, the two nonstandard gradient behaviors, and tape
semantics."""

import numpy as np
import pytest

from xmreg import autodiff as ad
from xmreg.errors import ConfigError, DomainError, ShapeError, UsageError

from conftest import numerical_grad, rel_err


def check_grad(build, arrays, tol=1e-4, h=1e-5):
    """Gradient-check ``build`` (Tensor args -> scalar Tensor) on ``arrays``."""
    tensors = [ad.param(a) for a in arrays]
    with ad.Tape():
        loss = build(*tensors)
        ad.backward(loss)

    def forward(*raw):
        return build(*[ad.constant(r) for r in raw]).item()

    for i, t in enumerate(tensors):
        num = numerical_grad(forward, arrays, i, h=h)
        assert rel_err(t.grad, num) <= tol, f"argument {i} failed gradient check"


class TestMatmul:
    def test_identity(self):
        a = ad.constant(np.eye(2))
        b = ad.constant([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_orthogonal_vectors(self):
        out = ad.matmul(ad.constant([[1.0, 0.0]]), ad.constant([[0.0], [1.0]]))
        assert out.data == np.array([[0.0]])

    def test_gradient_vs_finite_differences(self, rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 5))
        check_grad(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b], tol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows(ad.constant([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_shift_invariance_no_overflow(self):
        out = ad.softmax_rows(ad.constant([[3.0, 1003.0]]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data[0, 1], 1.0, atol=1e-12)
        np.testing.assert_allclose(out.data[0, 0], 0.0, atol=1e-12)

    def test_rows_sum_to_one_and_open_interval(self, rng):
        x = rng.uniform(-5, 5, (20, 7))
        out = ad.softmax_rows(ad.constant(x))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_jacobian_vs_finite_differences(self, rng):
        x = rng.uniform(-2, 2, (3, 5))
        w = rng.uniform(-1, 1, (3, 5))
        check_grad(
            lambda t: ad.tsum(ad.mul(ad.softmax_rows(t), w)), [x], tol=1e-5
        )


class TestSoftplus:
    def test_zero_closed_form(self):
        assert ad.softplus(ad.constant(0.0)).item() == pytest.approx(np.log(2.0))

    def test_derivative_at_zero(self):
        x = ad.param(0.0)
        with ad.Tape():
            ad.backward(ad.softplus(x))
        assert x.grad == pytest.approx(0.5)

    def test_no_underflow_at_minus_forty(self):
        out = ad.softplus(ad.constant(-40.0)).item()
        assert out > 0.0
        # high-precision reference: log1p(exp(-40))
        assert out == pytest.approx(np.log1p(np.exp(-40.0)), rel=1e-12)

    def test_large_positive_stable(self):
        assert ad.softplus(ad.constant(800.0)).item() == pytest.approx(800.0)


class TestReparamSample:
    def test_zero_noise_returns_mu(self, rng):
        mu = rng.normal(size=(4, 3))
        sigma = np.abs(rng.normal(size=(4, 3))) + 0.1
        out = ad.reparam_sample(ad.constant(mu), ad.constant(sigma), np.zeros((4, 3)))
        np.testing.assert_array_equal(out.data, mu)

    def test_unit_case(self):
        out = ad.reparam_sample(
            ad.constant(np.zeros(1)), ad.constant(np.ones(1)), np.array([1.5])
        )
        assert out.item() == 1.5

    def test_sigma_gradient_is_eps(self, rng):
        eps = rng.normal(size=(3, 2))
        mu = rng.normal(size=(3, 2))
        sigma = np.abs(rng.normal(size=(3, 2))) + 0.5
        m, s = ad.param(mu), ad.param(sigma)
        with ad.Tape():
            ad.backward(ad.tsum(ad.reparam_sample(m, s, eps)))
        np.testing.assert_allclose(s.grad, eps, atol=1e-12)
        np.testing.assert_allclose(m.grad, np.ones_like(mu), atol=1e-12)

    def test_gradient_check(self, rng):
        eps = rng.normal(size=(3, 2))
        mu = rng.uniform(-2, 2, (3, 2))
        sigma = rng.uniform(0.2, 2, (3, 2))
        check_grad(
            lambda m, s: ad.tsum(
                ad.mul(ad.reparam_sample(m, s, eps), eps + 0.3)
            ),
            [mu, sigma],
        )

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(DomainError):
            ad.reparam_sample(
                ad.constant(np.zeros(2)), ad.constant([1.0, 0.0]), np.zeros(2)
            )


class TestGrl:
    def test_forward_is_bitwise_identity(self, rng):
        x = ad.constant(rng.normal(size=(5, 3)))
        out = ad.grl(x, 0.5)
        assert np.array_equal(out.data, x.data)

    def test_gradient_inversion(self):
        x = ad.param(1.0)
        with ad.Tape():
            y = ad.mul(ad.grl(x, 0.01), 2.0)  # upstream gradient 2.0
            ad.backward(y)
        assert x.grad == pytest.approx(-0.02, abs=1e-15)

    def test_double_grl_scales_by_product(self):
        x = ad.param(3.0)
        with ad.Tape():
            ad.backward(ad.grl(ad.grl(x, 0.1), 0.5))
        assert x.grad == pytest.approx(0.05, abs=1e-15)

    def test_nonpositive_lambda_rejected(self):
        with pytest.raises(ConfigError):
            ad.grl(ad.constant(1.0), 0.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = ad.param(rng.normal(size=(4, 5)))
        with ad.Tape():
            ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((4, 5)))

    def test_square_at_three(self):
        x = ad.param(3.0)
        with ad.Tape():
            ad.backward(ad.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_loss_rejected(self):
        x = ad.param(np.ones(3))
        with pytest.raises(UsageError):
            ad.backward(x)

    def test_untracked_loss_rejected(self):
        with pytest.raises(UsageError):
            ad.backward(ad.constant(1.0))

    def test_repeated_calls_accumulate(self):
        x = ad.param(2.0)
        with ad.Tape():
            y = ad.mul(x, x)
            ad.backward(y)
            ad.backward(y)
        assert x.grad == pytest.approx(8.0)
        x.zero_grad()
        assert x.grad == 0.0

    def test_untracked_inputs_never_receive_gradient(self):
        x, c = ad.param(2.0), ad.constant(3.0)
        with ad.Tape():
            ad.backward(ad.mul(x, c))
        assert c.grad is None

    def test_diamond_graph_accumulates_once_per_path(self):
        x = ad.param(1.5)
        with ad.Tape():
            y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))  # x^2 + 2x
            ad.backward(y)
        assert x.grad == pytest.approx(2 * 1.5 + 2.0)

    def test_tape_replay_is_deterministic(self, rng):
        x0 = rng.normal(size=(3, 3))

        def run():
            x = ad.param(x0)
            with ad.Tape():
                out = ad.tsum(ad.tanh(ad.matmul(x, x)))
                ad.backward(out)
            return out.item(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestElementwiseOpsGradients:
    """Every remaining differentiable op against the finite-difference oracle."""

    def test_add_sub_mul_div(self, rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(0.5, 2, (3, 4))
        check_grad(lambda x, y: ad.tsum(ad.add(x, y)), [a, b])
        check_grad(lambda x, y: ad.tsum(ad.sub(x, y)), [a, b])
        check_grad(lambda x, y: ad.tsum(ad.mul(x, y)), [a, b])
        check_grad(lambda x, y: ad.tsum(ad.div(x, y)), [a, b])

    def test_broadcast_bias_add(self, rng):
        a = rng.uniform(-2, 2, (4, 3))
        bias = rng.uniform(-1, 1, (3,))
        check_grad(lambda x, y: ad.tsum(ad.add(x, y)), [a, bias])

    def test_unary_maps(self, rng):
        x = rng.uniform(-2, 2, (3, 4))
        pos = rng.uniform(0.1, 2, (3, 4))
        w = rng.uniform(-1, 1, (3, 4))
        check_grad(lambda t: ad.tsum(ad.mul(ad.exp(t), w)), [x])
        check_grad(lambda t: ad.tsum(ad.mul(ad.log(t), w)), [pos])
        check_grad(lambda t: ad.tsum(ad.mul(ad.sqrt(t), w)), [pos])
        check_grad(lambda t: ad.tsum(ad.mul(ad.tanh(t), w)), [x])
        check_grad(lambda t: ad.tsum(ad.mul(ad.softplus(t), w)), [x])
        check_grad(lambda t: ad.tsum(ad.neg(t)), [x])

    def test_relu_away_from_kink(self, rng):
        x = rng.uniform(0.2, 2, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
        w = rng.uniform(-1, 1, (3, 4))
        check_grad(lambda t: ad.tsum(ad.mul(ad.relu(t), w)), [x])

    def test_clip_interior(self, rng):
        x = rng.uniform(-0.8, 0.8, (3, 4))
        check_grad(lambda t: ad.tsum(ad.clip(t, -1.0, 1.0)), [x])

    def test_reductions(self, rng):
        x = rng.uniform(-2, 2, (4, 3))
        check_grad(lambda t: ad.mean(t), [x])
        check_grad(lambda t: ad.l2_norm(t), [x])

    def test_transpose_and_concat(self, rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (2, 4))
        w = rng.uniform(-1, 1, (5, 4))
        check_grad(
            lambda x, y: ad.tsum(ad.mul(ad.concat([x, y], axis=0), w)), [a, b]
        )
        check_grad(lambda x: ad.tsum(ad.mul(ad.transpose(x), w[:4, :3])), [a])

    def test_row_normalize(self, rng):
        x = rng.uniform(-2, 2, (4, 3)) + 0.1
        w = rng.uniform(-1, 1, (4, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.row_normalize(t), w)), [x])
        out = ad.row_normalize(ad.constant(np.vstack([x, np.zeros(3)])))
        np.testing.assert_array_equal(out.data[-1], np.zeros(3))

    def test_elementwise_max_routing_and_ties(self, rng):
        a = np.array([[0.1, 0.5], [0.7, 0.7]])
        b = np.array([[0.5, 0.5], [0.2, 0.9]])
        ta, tb = ad.param(a), ad.param(b)
        with ad.Tape():
            out, winner = ad.elementwise_max([ta, tb])
            ad.backward(ad.tsum(out))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5], [0.7, 0.9]])
        # ties route to the lowest operand index
        np.testing.assert_array_equal(winner, [[1, 0], [0, 1]])
        np.testing.assert_array_equal(ta.grad, [[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(tb.grad, [[1.0, 0.0], [0.0, 1.0]])

    def test_gathers(self, rng):
        x = rng.uniform(-2, 2, (5, 4))
        idx = np.array([0, 2, 2, 4])
        w = rng.uniform(-1, 1, (4, 4))
        wc = rng.uniform(-1, 1, (5, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.take_rows(t, idx), w)), [x])
        check_grad(lambda t: ad.tsum(ad.mul(ad.take_columns(t, idx[:3]), wc)), [x])
        rows = np.array([0, 1, 1, 4])
        cols = np.array([3, 0, 0, 2])
        wv = rng.uniform(-1, 1, 4)
        check_grad(
            lambda t: ad.tsum(ad.mul(ad.gather_pairs(t, rows, cols), wv)), [x]
        )

    def test_pairwise_dist(self, rng):
        a = rng.uniform(-2, 2, (4, 3))
        b = rng.uniform(-2, 2, (5, 3))
        w = rng.uniform(-1, 1, (4, 5))
        check_grad(lambda x, y: ad.tsum(ad.mul(ad.pairwise_dist(x, y), w)), [a, b])
        # brute-force forward oracle
        expected = np.array([[np.linalg.norm(ai - bj) for bj in b] for ai in a])
        np.testing.assert_allclose(
            ad.pairwise_dist(ad.constant(a), ad.constant(b)).data, expected, atol=1e-12
        )

    def test_avg_pool(self, rng):
        h, w = 4, 6
        x = rng.uniform(-2, 2, (h * w, 3))
        ww = rng.uniform(-1, 1, (h * w // 4, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.avg_pool_2x2(t, h, w), ww)), [x])
        # window-mean oracle
        grid = x.reshape(h, w, 3)
        expected = np.zeros((h // 2, w // 2, 3))
        for i in range(h // 2):
            for j in range(w // 2):
                expected[i, j] = grid[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean((0, 1))
        out = ad.avg_pool_2x2(ad.constant(x), h, w)
        np.testing.assert_allclose(out.data, expected.reshape(-1, 3), atol=1e-12)

    def test_segment_mean(self, rng):
        x = rng.uniform(-2, 2, (6, 3))
        seg = np.array([0, 0, 2, 2, 2, 0])
        w = rng.uniform(-1, 1, (3, 3))
        check_grad(lambda t: ad.tsum(ad.mul(ad.segment_mean(t, seg, 3), w)), [x])
        out = ad.segment_mean(ad.constant(x), seg, 3)
        np.testing.assert_array_equal(out.data[1], np.zeros(3))  # empty segment

    def test_segment_logsumexp(self, rng):
        x = rng.uniform(-2, 2, 7)
        seg = np.array([0, 0, 1, 1, 1, 3, 3])
        w = rng.uniform(-1, 1, 4)
        w[2] = 0.0  # empty segment produces -inf; exclude from the loss

        def build(t):
            lse = ad.segment_logsumexp(t, seg, 4)
            picked = ad.take_rows(lse, np.array([0, 1, 3]))
            return ad.tsum(ad.mul(picked, w[[0, 1, 3]]))

        check_grad(build, [x])
        out = ad.segment_logsumexp(ad.constant(x), seg, 4)
        assert out.data[2] == -np.inf
        from scipy.special import logsumexp

        np.testing.assert_allclose(out.data[0], logsumexp(x[:2]), atol=1e-12)
