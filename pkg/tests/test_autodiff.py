import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covcaps import autodiff as ad
from covcaps.autodiff import BatchNormState, ComputationRecord, Tensor, backward, grad_check
from covcaps.errors import BatchSizeError, ContractError, DimensionError, NumericError


def naive_conv(x, k, stride, pad):
    """Direct loop cross-correlation, independent of the im2col implementation."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * k[f])
    return out


def naive_pool(x, window, stride):
    n, c, h, w = x.shape
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + window,
                                j * stride:j * stride + window].max(axis=(2, 3))
    return out


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestRecording:
    def test_backward_sets_grad_and_consumes_record(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with ComputationRecord() as rec:
            y = ad.sum(ad.square(x))
        assert len(rec) == 2
        backward(rec, y)
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])
        assert len(rec) == 0

    def test_fan_out_contributions_add(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with ComputationRecord() as rec:
            y = ad.sum(ad.add(ad.mul(x, x), x))  # x^2 + x
        backward(rec, y)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_constants_are_not_recorded(self):
        with ComputationRecord() as rec:
            ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert len(rec) == 0

    def test_no_record_suspends_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ComputationRecord() as rec:
            with ad.no_record():
                ad.square(x)
        assert len(rec) == 0

    def test_nonscalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ComputationRecord() as rec:
            y = ad.square(x)
        with pytest.raises(ContractError):
            backward(rec, y)

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericError):
            ad.log(Tensor(np.array([0.0, 1.0])))

    def test_operators(self):
        a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 5.0]))
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((b - a).data, [2, 3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((a * 2.0).data, [2, 4])
        np.testing.assert_array_equal((-a).data, [-1, -2])

    def test_item_requires_single_element(self):
        assert Tensor(np.array([[2.5]])).item() == 2.5
        with pytest.raises(ContractError):
            Tensor(np.ones(2)).item()


class TestForwardOracles:
    def test_matmul_matches_numpy(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
    def test_conv2d_matches_direct_loops(self, rng, stride, pad):
        x, k = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
        out = ad.conv2d(Tensor(x), Tensor(k), stride, pad).data
        np.testing.assert_allclose(out, naive_conv(x, k, stride, pad), atol=1e-12)

    def test_conv2d_unbatched_input(self, rng):
        x, k = rng.normal(size=(1, 5, 5)), rng.normal(size=(2, 1, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(k), 1, 1).data
        np.testing.assert_allclose(out, naive_conv(x[None], k, 1, 1)[0])

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 3), (2, 1), (4, 4)])
    def test_maxpool_matches_direct_loops(self, rng, window, stride):
        x = rng.normal(size=(2, 3, 8, 8))
        np.testing.assert_array_equal(ad.maxpool2d(Tensor(x), window, stride).data,
                                      naive_pool(x, window, stride))

    def test_maxpool_tie_routes_gradient_to_first(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with ComputationRecord() as rec:
            y = ad.sum(ad.maxpool2d(x, 2))
        backward(rec, y)
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    def test_softmax_rows_sum_to_one(self, rng):
        p = ad.softmax_axis(Tensor(rng.normal(size=(5, 4)) * 30), axis=1).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_log_softmax_equals_log_of_softmax(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_allclose(ad.log_softmax(x, 1).data, np.log(ad.softmax_axis(x, 1).data))

    def test_batchnorm_training_normalises(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(50, 4)))
        state = BatchNormState.fresh(4)
        y = ad.batchnorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), state, True).data
        np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1, atol=1e-4)

    def test_batchnorm_running_statistics(self):
        x = np.array([[1.0], [3.0]])
        state = BatchNormState.fresh(1, momentum=0.9)
        ad.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)
        # mean 2, unbiased variance 2
        np.testing.assert_allclose(state.running_mean, [0.2])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * 2.0])

    def test_batchnorm_inference_uses_running_statistics(self):
        state = BatchNormState(np.array([1.0]), np.array([4.0]), eps=0.0)
        y = ad.batchnorm(Tensor(np.array([[5.0]])), Tensor(np.array([2.0])),
                         Tensor(np.array([0.5])), state, False).data
        np.testing.assert_allclose(y, [[2.0 * (5.0 - 1.0) / 2.0 + 0.5]])

    def test_batchnorm_single_row_training_rejected(self):
        with pytest.raises(BatchSizeError):
            ad.batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         BatchNormState.fresh(3), True)

    def test_norm_subgradient_at_origin(self):
        x = Tensor(np.zeros((1, 3)), requires_grad=True)
        with ComputationRecord() as rec:
            y = ad.sum(ad.norm(x))
        backward(rec, y)
        np.testing.assert_array_equal(x.grad, 0)


def _check(fn, inputs, **kw):
    result = grad_check(fn, inputs, **kw)
    assert result.passed, result
    return result


class TestGradients:
    @pytest.mark.parametrize("op", [ad.square, ad.sigmoid, ad.exp, lambda t: ad.scale(t, -2.5),
                                    lambda t: ad.add_constant(t, 3.0),
                                    lambda t: ad.reshape(t, (6, 2)),
                                    lambda t: ad.transpose(t, (1, 0)),
                                    lambda t: ad.softmax_axis(t, 1),
                                    lambda t: ad.log_softmax(t, 0),
                                    lambda t: ad.mean(t, 1), lambda t: ad.max_axis(t, 1),
                                    lambda t: ad.norm(t, 0)])
    def test_elementwise_and_shape_ops(self, rng, op):
        x = param(rng, 4, 3)
        w = rng.normal(size=op(Tensor(x.data)).shape)
        _check(lambda: ad.sum(ad.mul(op(x), w)), [x])

    def test_relu_away_from_kink(self, rng):
        x = Tensor(rng.choice([-1, 1], size=(3, 3)) * rng.uniform(0.1, 1, size=(3, 3)))
        _check(lambda: ad.sum(ad.square(ad.relu(x))), [x])

    def test_log(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)))
        _check(lambda: ad.sum(ad.log(x)), [x])

    def test_binary_ops(self, rng):
        a, b = param(rng, 3, 4), param(rng, 3, 4)
        _check(lambda: ad.sum(ad.mul(ad.sub(a, b), ad.add(a, b))), [a, b])

    def test_concat_and_bias(self, rng):
        a, b, bias = param(rng, 2, 3, 2), param(rng, 2, 1, 2), param(rng, 4)
        w = rng.normal(size=(2, 4, 2))
        _check(lambda: ad.sum(ad.mul(ad.bias_add(ad.concat([a, b], 1), bias, axis=1), w)),
               [a, b, bias])

    def test_matmul(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        _check(lambda: ad.sum(ad.square(ad.matmul(a, b))), [a, b])

    def test_einsum(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        _check(lambda: ad.sum(ad.square(ad.einsum("nij,jk->nik", a, b))), [a, b])

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
    def test_conv_relu_pool(self, rng, stride, pad):
        x, k = param(rng, 2, 2, 6, 6), param(rng, 3, 2, 3, 3)
        w = None

        def f():
            nonlocal w
            y = ad.maxpool2d(ad.relu(ad.conv2d(x, k, stride, pad)), 2)
            if w is None:
                w = rng.normal(size=y.shape)
            return ad.sum(ad.mul(y, w))
        _check(f, [x, k])

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, rng, training):
        x, g, b = param(rng, 6, 3), param(rng, 3), param(rng, 3)
        w = rng.normal(size=(6, 3))
        state = BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2, size=3))

        def f():
            s = BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return ad.sum(ad.mul(ad.batchnorm(x, g, b, s, training), w))
        _check(f, [x, g, b])

    def test_batchnorm2d(self, rng):
        x, g, b = param(rng, 2, 3, 2, 2), param(rng, 3), param(rng, 3)
        w = rng.normal(size=(2, 3, 2, 2))
        _check(lambda: ad.sum(ad.mul(ad.batchnorm2d(x, g, b, BatchNormState.fresh(3), True), w)),
               [x, g, b])


class TestGradCheckItself:
    def test_detects_a_wrong_adjoint(self):
        x = Tensor(np.array([1.0, 2.0]))

        def bad():
            return ad._emit("bad_square", (x,), np.array([np.sum(x.data ** 2)]), lambda g: (g * x.data,))
        assert not grad_check(bad, [x]).passed

    @pytest.mark.parametrize("step", [0.0, -1e-6, 1e-2])
    def test_step_bounds(self, step):
        with pytest.raises(ContractError):
            grad_check(lambda: None, [], step=step)

    def test_error_measure_is_relative_above_one(self):
        x = Tensor(np.array([10.0]))
        result = grad_check(lambda: ad.sum(ad.exp(x)), [x], step=1e-5)
        assert result.max_error < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**32 - 1))
def test_conv_property_matches_oracle(n, c, side, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    if k > side + 2 * pad:
        return
    x, kern = rng.normal(size=(n, c, side, side)), rng.normal(size=(2, c, k, k))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(kern), stride, pad).data,
                               naive_conv(x, kern, stride, pad), atol=1e-10)
