"""Kernel-level checks: frozen examples, finite-difference verification,
and the stability/determinism properties every downstream module leans on."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from prunevit import numcore as nc
from prunevit.errors import ContractError, EmptyPoolError, ShapeError


def _rand(rng, *shape):
    return nc.Tensor(rng.uniform(-2.0, 2.0, size=shape))


class TestMatmul:
    def test_identity(self):
        m = nc.Tensor(np.arange(9.0).reshape(3, 3))
        out = nc.matmul(nc.Tensor(np.eye(3)), m)
        assert_allclose(out.data, m.data)

    def test_hand_case(self):
        a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = nc.Tensor([[1.0], [1.0]])
        assert_allclose((a @ b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nc.matmul(nc.Tensor(np.ones((2, 3))), nc.Tensor(np.ones((2, 3))))

    def test_batched_gradient(self):
        rng = np.random.default_rng(0)
        a = _rand(rng, 2, 3, 4)
        b = _rand(rng, 4, 5)
        err = nc.grad_check(lambda: nc.tsum(nc.matmul(a, b) * 0.3), [a, b])
        assert err < 1e-6


class TestLayernorm:
    def test_constant_row_is_zero(self):
        x = nc.Tensor(np.full((2, 3, 4), 7.0))
        out = nc.layernorm(x, nc.Tensor(np.ones(4)), nc.Tensor(np.zeros(4)))
        assert_allclose(out.data, 0.0)

    def test_two_point_row(self):
        x = nc.Tensor([[1.0, 3.0]])
        out = nc.layernorm(x, nc.Tensor(np.ones(2)), nc.Tensor(np.zeros(2)),
                           eps=1e-12)
        assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_output_mean_is_beta(self):
        rng = np.random.default_rng(1)
        x = _rand(rng, 4, 6, 8)
        beta = nc.Tensor(rng.normal(size=8))
        out = nc.layernorm(x, nc.Tensor(np.ones(8)), beta)
        assert_allclose(out.data.mean(axis=-1), np.full((4, 6), beta.data.mean()),
                        atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, gamma, beta = _rand(rng, 2, 5), _rand(rng, 5), _rand(rng, 5)
        err = nc.grad_check(
            lambda: nc.tsum(nc.layernorm(x, gamma, beta) ** 2),
            [x, gamma, beta],
        )
        assert err < 1e-6


class TestActivations:
    def test_gelu_at_zero(self):
        assert nc.gelu(nc.Tensor([0.0])).data[0] == 0.0

    def test_sigmoid_at_zero(self):
        assert nc.sigmoid(nc.Tensor([0.0])).data[0] == 0.5

    def test_gelu_against_scalar_oracle(self):
        # oracle: x * Phi(x) with the stdlib erf, independent of scipy
        xs = np.linspace(-4.0, 4.0, 33)
        want = [x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0))) for x in xs]
        assert_allclose(nc.gelu(nc.Tensor(xs)).data, want, rtol=1e-14)

    def test_activation_dispatch(self):
        x = nc.Tensor([1.0])
        assert nc.activation(x, "gelu").data[0] == nc.gelu(x).data[0]
        assert nc.activation(x, "sigmoid").data[0] == nc.sigmoid(x).data[0]
        with pytest.raises(ShapeError):
            nc.activation(x, "relu")

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x = _rand(rng, 3, 4)
        assert nc.grad_check(lambda: nc.tsum(nc.gelu(x)), [x]) < 1e-6
        assert nc.grad_check(lambda: nc.tsum(nc.sigmoid(x)), [x]) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        assert_allclose(nc.softmax(nc.Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_hand_case(self):
        out = nc.softmax(nc.Tensor([math.log(1.0), math.log(3.0)]))
        assert_allclose(out.data, [0.25, 0.75], rtol=1e-14)

    def test_overflow_stability(self):
        out = nc.softmax(nc.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert_allclose(out.data, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one_and_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(50, 7))
        y = nc.softmax(nc.Tensor(x), axis=-1).data
        assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        y2 = nc.softmax(nc.Tensor(x + 13.5), axis=-1).data
        assert_allclose(y, y2, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, 4, 5)
        w = nc.Tensor(rng.normal(size=(4, 5)))
        err = nc.grad_check(lambda: nc.tsum(nc.softmax(x, axis=-1) * w), [x])
        assert err < 1e-6


class TestMaskedMean:
    def test_all_ones_equals_plain_mean(self):
        rng = np.random.default_rng(6)
        x = _rand(rng, 3, 5, 4)
        out = nc.masked_mean(x, nc.Tensor(np.ones((3, 5))))
        assert_allclose(out.data[:, 0, :], x.data.mean(axis=1), atol=1e-12)

    def test_singleton_mask(self):
        rng = np.random.default_rng(7)
        x = _rand(rng, 2, 4, 3)
        mask = np.zeros((2, 4))
        mask[:, 2] = 1.0
        out = nc.masked_mean(x, nc.Tensor(mask))
        assert_allclose(out.data[:, 0, :], x.data[:, 2, :])

    def test_hand_case(self):
        x = nc.Tensor([[[1.0, 10.0], [3.0, 30.0]]])
        out = nc.masked_mean(x, nc.Tensor([[1.0, 1.0]]))
        assert_allclose(out.data, [[[2.0, 20.0]]])

    def test_empty_mask_raises(self):
        x = nc.Tensor(np.ones((2, 3, 4)))
        mask = np.ones((2, 3))
        mask[1] = 0.0
        with pytest.raises(EmptyPoolError):
            nc.masked_mean(x, nc.Tensor(mask))

    def test_gradient_including_mask(self):
        rng = np.random.default_rng(8)
        x = _rand(rng, 2, 5, 3)
        mask = nc.Tensor(rng.uniform(0.2, 1.0, size=(2, 5)))
        err = nc.grad_check(
            lambda: nc.tsum(nc.mul(nc.masked_mean(x, mask),
                                   nc.masked_mean(x, mask))),
            [x, mask],
        )
        assert err < 1e-6


class TestGradCheck:
    def test_sum_gradient_is_exact(self):
        rng = np.random.default_rng(9)
        x = _rand(rng, 3, 3)
        assert nc.grad_check(lambda: nc.tsum(x), [x]) < 1e-9

    def test_layernorm_matmul_chain(self):
        rng = np.random.default_rng(10)
        x, w = _rand(rng, 2, 4, 6), _rand(rng, 6, 3)
        gamma, beta = nc.Tensor(np.ones(6)), nc.Tensor(np.zeros(6))
        err = nc.grad_check(
            lambda: nc.tsum(nc.matmul(nc.layernorm(x, gamma, beta), w)),
            [x, w, gamma, beta],
        )
        assert err < 1e-6

    def test_rejects_non_scalar(self):
        x = nc.Tensor(np.ones((2, 2)))
        with pytest.raises(ContractError):
            nc.grad_check(lambda: nc.mul(x, 2.0), [x])

    def test_random_kernel_sweep(self):
        # every kernel, random inputs in [-2, 2]
        rng = np.random.default_rng(11)
        x = _rand(rng, 3, 4)
        y = _rand(rng, 3, 4)
        cases = [
            (lambda: nc.tsum(nc.mul(x, y)), 1e-6),
            (lambda: nc.tsum(nc.div(x, nc.add(nc.mul(y, y), 1.0))), 1e-6),
            (lambda: nc.tsum(nc.exp(nc.mul(x, 0.3))), 1e-6),
            (lambda: nc.tsum(nc.log(nc.add(nc.mul(x, x), 1.0))), 1e-6),
            (lambda: nc.tsum(nc.power(nc.add(nc.mul(x, x), 1.0), 1.5)), 1e-6),
            (lambda: nc.tsum(nc.concat([x, y], axis=1) ** 2), 1e-6),
            (lambda: nc.tsum(nc.take(x, (slice(None), slice(1, 3)))), 1e-6),
            (lambda: nc.tsum(nc.broadcast_to(nc.reshape(x, (3, 4, 1)),
                                             (3, 4, 5))), 1e-6),
            (lambda: nc.tsum(nc.logsumexp(x, axis=-1)), 1e-6),
        ]
        for fn, tol in cases:
            assert nc.grad_check(fn, [x, y]) < tol


class TestTapeAndDeterminism:
    def test_no_tape_records_nothing(self):
        tape = nc.GradTape()
        x = nc.Tensor([1.0, 2.0])
        nc.mul(x, 3.0)
        assert len(tape) == 0

    def test_each_input_gradient_produced_once(self):
        x = nc.Tensor([2.0])
        with nc.GradTape() as tape:
            y = nc.mul(x, x)      # x used twice by one record
            z = nc.add(y, x)      # and once more by another
        (g,) = tape.gradient(z, [x])
        assert_allclose(g, [5.0])

    def test_stop_gradient_blocks_flow(self):
        x = nc.Tensor([3.0])
        with nc.GradTape() as tape:
            out = nc.tsum(nc.mul(nc.stop_gradient(x), x))
        (g,) = tape.gradient(out, [x])
        assert_allclose(g, [3.0])

    def test_straight_through_passes_identity(self):
        x = nc.Tensor([0.2, 0.8])
        with nc.GradTape() as tape:
            hard = nc.straight_through(x, np.array([0.0, 1.0]))
            out = nc.tsum(nc.mul(hard, nc.Tensor([2.0, 5.0])))
        assert_allclose(hard.data, [0.0, 1.0])
        (g,) = tape.gradient(out, [x])
        assert_allclose(g, [2.0, 5.0])

    def test_kernels_bit_deterministic(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(6, 7))
        for fn in (
            lambda a: nc.softmax(nc.Tensor(a), axis=-1).data,
            lambda a: nc.gelu(nc.Tensor(a)).data,
            lambda a: nc.layernorm(nc.Tensor(a), nc.Tensor(np.ones(7)),
                                   nc.Tensor(np.zeros(7))).data,
        ):
            first, second = fn(x), fn(x)
            assert np.array_equal(first, second)
