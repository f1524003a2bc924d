import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covcaps.errors import ConfigurationError, DataError, DimensionError
from covcaps.gradcam import (
    cam_from,
    conv_layers,
    decode_pgm,
    default_layer,
    encode_pgm,
    gradcam,
    heatmap_filename,
    region_densities,
    render_heatmap,
    to_gray,
    upscale,
)
from covcaps.pipeline import Stage1Net, Stage2Net

from conftest import TINY_STAGE1, TINY_STAGE2


class TestCamFormula:
    def test_zero_gradient_gives_zero_map(self, rng):
        acts = rng.random((1, 3, 4, 4))
        np.testing.assert_array_equal(cam_from(acts, np.zeros_like(acts)), 0)

    def test_single_channel_by_hand(self):
        acts = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        grads = np.array([[[[0.5, 0.5], [-0.25, 0.25]]]])
        # alpha = mean gradient = 0.25
        np.testing.assert_allclose(cam_from(acts, grads), [[[0.25, 0.5], [0.75, 1.0]]])

    def test_negative_evidence_is_clipped(self):
        acts = np.ones((1, 2, 2, 2))
        acts[0, 1] = [[3.0, 0.0], [0.0, 0.0]]
        grads = np.stack([np.full((2, 2), 1.0), np.full((2, 2), -1.0)])[None]
        np.testing.assert_array_equal(cam_from(acts, grads), [[[0.0, 1.0], [1.0, 1.0]]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cam_from(np.zeros((1, 2, 3, 3)), np.zeros((1, 2, 3, 2)))


class TestGradcamOnNetworks:
    def test_stage1_shapes_and_sign(self, rng):
        net = Stage1Net(TINY_STAGE1, rng)
        maps = gradcam(net, rng.random((3, 8, 8)))
        assert len(maps) == 3
        assert maps[0].layer == default_layer(net) == "conv4"
        assert maps[0].target == "infected"
        assert maps[0].shape == (4, 4)  # after the pool
        assert all((m.grid >= 0).all() for m in maps)

    @pytest.mark.parametrize("layer,shape", [("conv1", (8, 8)), ("conv2", (8, 8)),
                                             ("conv3", (4, 4))])
    def test_stage1_layer_choice(self, rng, layer, shape):
        net = Stage1Net(TINY_STAGE1, rng)
        assert gradcam(net, rng.random((8, 8)), layer=layer)[0].shape == shape

    def test_stage2_zero_gate_gives_zero_covid_map(self, rng):
        net = Stage2Net(TINY_STAGE2, rng)
        x = rng.random((3, 8, 8))
        maps = gradcam(net, x, target="covid", p_inf=[0.0, 0.8, 0.0])
        np.testing.assert_array_equal(maps[0].grid, 0)
        np.testing.assert_array_equal(maps[2].grid, 0)

    def test_stage2_maps_are_per_candidate(self, rng):
        net = Stage2Net(TINY_STAGE2, rng)
        x = rng.random((3, 8, 8))
        together = gradcam(net, x, target="cap", p_inf=[0.5, 0.6, 0.7])
        alone = gradcam(net, x[1], target="cap", p_inf=[0.6])
        np.testing.assert_allclose(together[1].grid, alone[0].grid, atol=1e-12)

    def test_unknown_layer_lists_valid_ones(self, rng):
        net = Stage2Net(TINY_STAGE2, rng)
        assert conv_layers(net) == ("conv1", "conv2", "conv3")
        with pytest.raises(ConfigurationError, match="conv1, conv2, conv3"):
            gradcam(net, rng.random((8, 8)), layer="caps1")

    @pytest.mark.parametrize("kw", [dict(target="dog"), dict(p_inf=[1.5])])
    def test_stage2_argument_validation(self, rng, kw):
        net = Stage2Net(TINY_STAGE2, rng)
        with pytest.raises((ConfigurationError, DataError)):
            gradcam(net, rng.random((8, 8)), **kw)

    def test_stage1_rejects_class_target(self, rng):
        with pytest.raises(ConfigurationError):
            gradcam(Stage1Net(TINY_STAGE1, rng), rng.random((8, 8)), target="covid")

    def test_wrong_side(self, rng):
        with pytest.raises(DimensionError):
            gradcam(Stage1Net(TINY_STAGE1, rng), rng.random((6, 6)))


class TestRendering:
    def test_two_by_two_gray_levels(self):
        gray = to_gray(np.array([[0.0, 0.5], [1.0, 0.25]]))
        np.testing.assert_array_equal(gray, [[0, 128], [255, 64]])

    def test_constant_map_is_white_and_zero_map_black(self):
        np.testing.assert_array_equal(to_gray(np.full((3, 3), 0.2)), 255)
        np.testing.assert_array_equal(to_gray(np.zeros((3, 3))), 0)

    def test_nearest_upscale(self):
        up = upscale(np.array([[1, 2], [3, 4]]), 4)
        np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4],
                                           [3, 3, 4, 4]])

    def test_filename(self):
        assert heatmap_filename("covid_007", 12, "covid") == "covid_007_12_covid.pgm"

    def test_render_file(self, tmp_path, rng):
        net = Stage1Net(TINY_STAGE1, rng)
        m = gradcam(net, rng.random((8, 8)))[0]
        path = render_heatmap(m, 16, tmp_path / "h.pgm")
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n16 16\n255\n")
        assert decode_pgm(raw).shape == (16, 16)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6))))
    def test_pgm_round_trip(self, gray):
        np.testing.assert_array_equal(decode_pgm(encode_pgm(gray)), gray)

    def test_pixels_that_look_like_whitespace(self):
        gray = np.array([[32, 10], [9, 13]], dtype=np.uint8)
        np.testing.assert_array_equal(decode_pgm(encode_pgm(gray)), gray)

    @pytest.mark.parametrize("raw", [b"P6\n1 1\n255\n\0", b"P5\n2 2\n255\n\0"])
    def test_bad_pgm(self, raw):
        with pytest.raises(DataError):
            decode_pgm(raw)


class TestRegionDensities:
    def test_means(self):
        heat = np.array([[4.0, 2.0], [0.0, 9.0]])
        lesion = np.array([[1, 0], [0, 0]])
        lung = np.array([[1, 1], [1, 0]])
        assert region_densities(heat, lesion, lung) == (4.0, 1.0)

    def test_empty_region(self):
        with pytest.raises(DataError):
            region_densities(np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2)))
