"""Tensor/tape engine: forward values, gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmf import ndcore as nd
from deepmf.errors import DimensionError, NonFiniteError
from helpers import finite_difference, max_rel_err


def _grad_of(build, arrays):
    """Analytic gradients of ``build(tensors) -> scalar tensor``."""
    tensors = [nd.parameter(a) for a in arrays]
    with nd.Tape() as tape:
        loss = build(tensors)
    grads = nd.backward(tape, loss)
    return [grads.get(t, np.zeros_like(a)) for t, a in zip(tensors, arrays)]


def _check_grads(build, arrays, tol=1e-6):
    analytic = _grad_of(build, arrays)
    numeric = finite_difference(
        lambda arrs: build([nd.Tensor(a) for a in arrs]).item(), arrays)
    for a, f in zip(analytic, numeric):
        assert max_rel_err(a, f) < tol


class TestTensor:
    def test_shape_and_values(self):
        t = nd.Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4
        assert t.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            nd.Tensor([1.0, float("nan")])
        with pytest.raises(NonFiniteError):
            nd.Tensor([float("inf")])

    def test_buffer_is_read_only(self):
        t = nd.Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0
        with pytest.raises(AttributeError):
            t.data = np.zeros(2)


class TestMatmul:
    def test_identity(self):
        out = nd.matmul(nd.Tensor([[1.0, 0.0], [0.0, 1.0]]),
                        nd.Tensor([[3.0], [4.0]]))
        assert out.tolist() == [[3.0], [4.0]]

    def test_dot_product_row(self):
        out = nd.matmul(nd.Tensor([[1.0, 2.0]]), nd.Tensor([[3.0], [4.0]]))
        assert out.tolist() == [[11.0]]

    def test_random_matches_triple_loop(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = nd.matmul(nd.Tensor(a), nd.Tensor(b))
        np.testing.assert_allclose(got.data, want, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nd.matmul(nd.Tensor([[1.0, 2.0]]), nd.Tensor([[1.0, 2.0]]))

    def test_gradients(self, rng):
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
        _check_grads(lambda ts: nd.total(nd.matmul(ts[0], ts[1])), arrays)


class TestElementwise:
    def test_logistic_midpoint_center_sharp(self):
        x = nd.Tensor([0.0])
        assert nd.logistic(x, 1.0, 0.0).tolist() == [0.5]
        assert nd.logistic(nd.Tensor([2.0]), 10.0, 2.0).tolist() == [0.5]
        sharp = nd.logistic(nd.Tensor([0.01]), 1e6, 0.0).data[0]
        assert abs(sharp - 1.0) < 1e-9

    def test_selu_square_abs_values(self, rng):
        x = rng.normal(size=20)
        np.testing.assert_allclose(nd.square(nd.Tensor(x)).data, x * x)
        np.testing.assert_allclose(nd.absval(nd.Tensor(x)).data, np.abs(x))
        got = nd.selu(nd.Tensor(x)).data
        assert np.all(got[x > 0] > 0)

    def test_gradients(self, rng):
        x = rng.normal(size=17) + 0.05  # keep clear of the selu kink
        for op in (nd.selu, nd.square,
                   lambda t: nd.logistic(t, 3.0, 0.2)):
            _check_grads(lambda ts, op=op: nd.total(op(ts[0])), [x])

    def test_absval_gradient_away_from_zero(self, rng):
        x = rng.normal(size=15)
        x[np.abs(x) < 0.1] += 0.5
        _check_grads(lambda ts: nd.total(nd.absval(ts[0])), [x])


class TestNorms:
    def test_pythagorean(self):
        assert nd.l2_norm(nd.Tensor([3.0, 4.0])).item() == 5.0

    def test_zero_vector_norm_and_guarded_gradient(self):
        z = nd.parameter(np.zeros(4))
        with nd.Tape() as tape:
            out = nd.l2_norm(z)
        assert out.item() == 0.0
        g = nd.backward(tape, out)[z]
        assert np.all(np.isfinite(g)) and np.all(g == 0.0)

    def test_random_matches_sqrt_sum_squares(self, rng):
        x = rng.normal(size=8)
        want = np.sqrt(sum(v * v for v in x))
        assert abs(nd.l2_norm(nd.Tensor(x)).item() - want) < 1e-12

    def test_row_l2norm_values_and_grads(self, rng):
        m = rng.normal(size=(4, 6))
        got = nd.row_l2norm(nd.Tensor(m)).data
        np.testing.assert_allclose(got, np.linalg.norm(m, axis=1), rtol=1e-12)
        _check_grads(lambda ts: nd.total(nd.row_l2norm(ts[0])), [m])

    def test_l2_norm_gradient(self, rng):
        x = rng.normal(size=9)
        _check_grads(lambda ts: nd.l2_norm(ts[0]), [x])


class TestCompositeGrads:
    def test_linear_map_gradient_matches_fd(self, rng):
        a = rng.normal(size=(5, 3))
        x = rng.normal(size=(3, 1))
        _check_grads(lambda ts: nd.total(nd.matmul(ts[0], ts[1])), [a, x])

    def test_power_rule(self):
        x = nd.parameter(np.asarray(3.0))
        with nd.Tape() as tape:
            loss = nd.total(nd.square(x))
        assert nd.backward(tape, loss)[x] == 6.0

    def test_mixed_expression(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 3)) + 3.0  # keep divisor away from zero

        def build(ts):
            return nd.mean(nd.square(nd.div(nd.sub(ts[0], ts[1]),
                                            nd.mul(ts[1], ts[1]))))

        _check_grads(build, [a, b])

    def test_add_bias_and_row_sum_grads(self, rng):
        m = rng.normal(size=(4, 3))
        v = rng.normal(size=3)
        _check_grads(lambda ts: nd.total(nd.row_sum(nd.add_bias(ts[0], ts[1]))),
                     [m, v])

    def test_clamp_min_gradient_masks(self):
        x = nd.parameter(np.array([-1.0, 0.5, 2.0]))
        with nd.Tape() as tape:
            loss = nd.total(nd.clamp_min(x, 0.0))
        g = nd.backward(tape, loss)[x]
        np.testing.assert_array_equal(g, [0.0, 1.0, 1.0])


class TestBackwardContract:
    def test_non_scalar_loss_rejected(self):
        x = nd.parameter(np.ones(3))
        with nd.Tape() as tape:
            y = nd.square(x)
        with pytest.raises(DimensionError):
            nd.backward(tape, y)

    def test_loss_off_tape_rejected(self):
        x = nd.parameter(np.ones(2))
        with nd.Tape() as tape:
            nd.total(x)
        stray = nd.Tensor(np.asarray(1.0))
        with pytest.raises(DimensionError):
            nd.backward(tape, stray)

    def test_fanout_accumulates(self):
        x = nd.parameter(np.asarray(2.0))
        with nd.Tape() as tape:
            y = nd.mul(x, x)          # x reused: d/dx = 2x
            loss = nd.total(y)
        assert nd.backward(tape, loss)[x] == 4.0

    def test_no_tape_means_no_recording(self):
        x = nd.parameter(np.ones(3))
        out = nd.square(x)  # simply computes
        assert out.tolist() == [1.0, 1.0, 1.0]

    def test_determinism_bit_identical(self, rng):
        a = rng.normal(size=(6, 5))
        b = rng.normal(size=(5, 4))

        def run():
            with nd.Tape() as tape:
                out = nd.mean(nd.square(nd.selu(nd.matmul(nd.Tensor(a),
                                                          nd.Tensor(b)))))
            return out.item()

        assert run() == run()


class TestLinearity:
    @given(a=st.floats(-5, 5), b=st.floats(-5, 5))
    @settings(max_examples=25, deadline=None)
    def test_backward_is_linear_in_the_loss(self, a, b):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=6)

        def grad(ca, cb):
            x = nd.parameter(x0)
            with nd.Tape() as tape:
                f = nd.total(nd.square(x))
                g = nd.l2_norm(x)
                loss = nd.add(nd.smul(f, ca), nd.smul(g, cb))
            return nd.backward(tape, loss)[x]

        combined = grad(a, b)
        parts = a * grad(1.0, 0.0) + b * grad(0.0, 1.0)
        np.testing.assert_allclose(combined, parts, rtol=1e-9, atol=1e-12)
