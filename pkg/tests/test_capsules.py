import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covcaps import autodiff as ad
from covcaps.autodiff import Tensor, grad_check
from covcaps.capsules import (
    CouplingReplay,
    MarginLossConfig,
    capsule_layer,
    inverse_frequency_weights,
    margin_loss,
    primary_caps,
    routing,
    squash,
)
from covcaps.errors import ConfigurationError, ContractError, DataError, DimensionError


def reference_routing(u, iterations):
    """Straight loop transcription of routing-by-agreement for one sample."""
    n_in, n_out, _ = u.shape
    b = np.zeros((n_in, n_out))
    history = []
    for it in range(iterations):
        c = np.exp(b) / np.exp(b).sum(axis=1, keepdims=True)
        history.append(c)
        v = np.zeros((n_out, u.shape[2]))
        for j in range(n_out):
            s = sum(c[i, j] * u[i, j] for i in range(n_in))
            n2 = s @ s
            v[j] = n2 / (1 + n2) * s / np.sqrt(n2) if n2 > 0 else 0 * s
        if it < iterations - 1:
            for i in range(n_in):
                for j in range(n_out):
                    b[i, j] += u[i, j] @ v[j]
    return v, history


class TestSquash:
    def test_three_four_vector(self):
        v = squash(Tensor(np.array([3.0, 4.0]))).data
        np.testing.assert_allclose(v, [25 / 26 * 3 / 5, 25 / 26 * 4 / 5])
        np.testing.assert_allclose(v, [0.576923, 0.769231], atol=1e-6)

    def test_origin_maps_to_origin(self):
        np.testing.assert_array_equal(squash(Tensor(np.zeros(4))).data, 0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e3, 1e3)))
    def test_norm_below_one_and_direction_kept(self, s):
        v = squash(Tensor(s)).data
        n_s, n_v = np.linalg.norm(s), np.linalg.norm(v)
        assert n_v < 1
        np.testing.assert_allclose(n_v, n_s**2 / (1 + n_s**2), rtol=1e-9, atol=1e-200)
        if n_s > 1e-6:
            np.testing.assert_allclose(v / n_v, s / n_s, atol=1e-9)

    def test_gradient(self, rng):
        s = Tensor(rng.normal(size=(3, 5)))
        w = rng.normal(size=(3, 5))
        assert grad_check(lambda: ad.sum(ad.mul(squash(s), w)), [s]).passed


class TestPrimaryCaps:
    def test_capsule_index_layout(self):
        fmap = np.arange(2 * 4 * 2 * 3, dtype=float).reshape(2, 4, 2, 3) / 100
        caps = primary_caps(Tensor(fmap), 2).data
        assert caps.shape == (2, 2 * 2 * 3, 2)
        # capsule g*H*W + h*W + w holds channels [2g, 2g+2) at pixel (h, w)
        g, h, w = 1, 1, 2
        raw = fmap[1, 2 * g:2 * g + 2, h, w]
        np.testing.assert_allclose(caps[1, g * 6 + h * 3 + w], squash(Tensor(raw)).data)

    def test_indivisible_channels(self):
        with pytest.raises(ConfigurationError):
            primary_caps(Tensor(np.ones((1, 6, 2, 2))), 4)

    def test_unbatched(self, rng):
        fmap = rng.normal(size=(4, 3, 3))
        np.testing.assert_allclose(primary_caps(Tensor(fmap), 2).data,
                                   primary_caps(Tensor(fmap[None]), 2).data[0])


class TestRouting:
    @pytest.mark.parametrize("iterations", [1, 2, 3, 5])
    def test_matches_reference_loop(self, rng, iterations):
        u = rng.normal(size=(6, 3, 4))
        v, state = routing(Tensor(u), iterations)
        v_ref, hist_ref = reference_routing(u, iterations)
        np.testing.assert_allclose(v.data, v_ref, atol=1e-12)
        for got, want in zip(state.history, hist_ref):
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_single_iteration_is_uniform_average(self, rng):
        u = rng.normal(size=(2, 5, 4, 3))
        v, _ = routing(Tensor(u), 1)
        expected = squash(Tensor(u.sum(axis=1) / 4)).data
        np.testing.assert_array_equal(v.data, expected)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigurationError):
            routing(Tensor(np.ones((2, 2, 2))), 0)

    def test_bad_rank(self):
        with pytest.raises(DimensionError):
            routing(Tensor(np.ones((2, 2))), 1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 4), st.integers(1, 4),
           st.integers(0, 2**32 - 1))
    def test_couplings_are_distributions(self, n_in, n_out, dim, iterations, seed):
        u = np.random.default_rng(seed).normal(size=(2, n_in, n_out, dim)) * 3
        _, state = routing(Tensor(u), iterations)
        for c in state.history:
            np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-12)
            assert (c >= 0).all()


class TestCapsuleLayerGradients:
    def _setup(self, rng):
        x = squash(Tensor(rng.normal(size=(2, 5, 3))))
        x = Tensor(x.data)
        w = Tensor(rng.normal(size=(5, 3, 4, 3)) * 0.5)
        target = rng.normal(size=(2, 3, 4))
        return x, w, target

    def test_full_gradient_variant(self, rng):
        x, w, target = self._setup(rng)

        def f():
            v, _ = capsule_layer(x, w, 3, differentiable=True)
            return ad.sum(ad.mul(v, target))
        assert grad_check(f, [x, w]).passed

    def test_stop_gradient_variant_with_replayed_couplings(self, rng):
        x, w, target = self._setup(rng)
        replay = CouplingReplay()
        with replay:
            capsule_layer(x, w, 3)

        def f():
            with replay:
                v, _ = capsule_layer(x, w, 3)
            return ad.sum(ad.mul(v, target))
        assert replay.replaying
        assert grad_check(f, [x, w]).passed

    def test_stop_gradient_differs_from_full_gradient(self, rng):
        x, w, target = self._setup(rng)
        w.requires_grad = True
        grads = []
        for diff in (False, True):
            with ad.ComputationRecord() as rec:
                v, _ = capsule_layer(x, w, 3, differentiable=diff)
                loss = ad.sum(ad.mul(v, target))
            ad.backward(rec, loss)
            grads.append(w.grad.copy())
        assert not np.allclose(grads[0], grads[1])

    def test_weight_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            capsule_layer(Tensor(np.ones((1, 4, 3))), Tensor(np.ones((5, 2, 2, 3))))

    def test_unbatched_matches_batched(self, rng):
        x, w, _ = self._setup(rng)
        v1, _ = capsule_layer(Tensor(x.data[0]), w)
        v2, _ = capsule_layer(x, w)
        np.testing.assert_allclose(v1.data, v2.data[0])


class TestMarginLoss:
    def test_hand_value(self):
        cfg = MarginLossConfig()
        loss = margin_loss(Tensor(np.array([[0.95, 0.3], [0.2, 0.6]])), [0, 1], cfg).item()
        # sample 1: 0 + 0.5*(0.3-0.1)^2 = 0.02; sample 2: (0.9-0.6)^2 + 0.5*(0.2-0.1)^2 = 0.095
        assert loss == pytest.approx((0.02 + 0.095) / 2, abs=1e-15)

    def test_unit_weights_equal_unweighted_exactly(self, rng):
        norms = Tensor(rng.uniform(0, 0.99, size=(7, 3)))
        t = rng.integers(0, 3, 7)
        a = margin_loss(norms, t, MarginLossConfig()).item()
        b = margin_loss(norms, t, MarginLossConfig().with_weights([1, 1, 1])).item()
        assert a == b

    def test_class_weights_scale_terms(self):
        norms = Tensor(np.array([[0.5, 0.5]]))
        base = margin_loss(norms, [0], MarginLossConfig()).item()
        weighted = margin_loss(norms, [0], MarginLossConfig().with_weights([2.0, 1.0])).item()
        # positive term (0.4^2) doubles, negative term 0.5*0.4^2 unchanged
        assert weighted - base == pytest.approx(0.16)

    def test_gradient(self, rng):
        norms = Tensor(rng.uniform(0.05, 0.95, size=(4, 3)))
        cfg = MarginLossConfig().with_weights([0.5, 1.0, 1.5])
        assert grad_check(lambda: margin_loss(norms, [0, 1, 2, 1], cfg), [norms]).passed

    @pytest.mark.parametrize("bad", [1.0, -0.1, 1.5])
    def test_norms_outside_unit_interval(self, bad):
        with pytest.raises(ContractError):
            margin_loss(Tensor(np.array([[bad, 0.2]])), [0], MarginLossConfig())

    def test_invalid_target(self):
        with pytest.raises(ContractError):
            margin_loss(Tensor(np.array([[0.2, 0.2]])), [2], MarginLossConfig())

    @pytest.mark.parametrize("kw", [dict(m_plus=0.1, m_minus=0.9), dict(lambda_neg=0.0),
                                    dict(class_weights=(1.0, -1.0))])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            MarginLossConfig(**kw)


class TestInverseFrequencyWeights:
    def test_hand_value(self):
        assert inverse_frequency_weights([0, 1, 1, 1], 2) == pytest.approx((1.5, 0.5))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 2), min_size=3, max_size=60))
    def test_mean_one_and_inverse_to_counts(self, labels):
        if len(set(labels)) < 3:
            with pytest.raises(DataError):
                inverse_frequency_weights(labels, 3)
            return
        w = np.array(inverse_frequency_weights(labels, 3))
        counts = np.bincount(labels, minlength=3)
        assert w.mean() == pytest.approx(1.0)
        np.testing.assert_allclose(w * counts, (w * counts)[0])
