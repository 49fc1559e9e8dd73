"""Saliency methods against their formula oracles and composition contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igrad import nn
from igrad.saliency import (
    AblationCam,
    AxiomCam,
    GradCam,
    GradCamPP,
    ScoreCam,
    SaliencyMap,
    bilinear_upsample,
    cam_weights,
    compose_saliency,
    input_gradient_map,
    make_method,
    minmax_norm,
    saliency_for,
    _logit_and_activation_grad,
)
from igrad.tensor import GradMode


@pytest.fixture
def model16():
    m = nn.build_model(nn.tinycnn((3, 16, 16), 4, (8, 16)), seed=1)
    # a little structure so maps are not near-constant
    rng = np.random.default_rng(0)
    for p in m.params:
        p.data += 0.05 * rng.normal(size=p.data.shape)
    return m


@pytest.fixture
def x16():
    return np.random.default_rng(2).uniform(0, 1, size=(3, 16, 16))


class TestHelpers:
    def test_minmax_constant_to_zeros(self):
        np.testing.assert_array_equal(minmax_norm(np.full((3, 3), 2.5)), np.zeros((3, 3)))

    def test_minmax_range(self):
        v = minmax_norm(np.array([[1.0, 3.0], [5.0, 2.0]]))
        assert v.min() == 0.0 and v.max() == 1.0

    def test_bilinear_identity(self):
        a = np.random.default_rng(3).normal(size=(5, 7))
        np.testing.assert_allclose(bilinear_upsample(a, (5, 7)), a, atol=1e-12)

    def test_bilinear_corners_align(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        up = bilinear_upsample(a, (8, 8))
        assert up[0, 0] == 1.0 and up[0, -1] == 2.0
        assert up[-1, 0] == 3.0 and up[-1, -1] == 4.0


class TestComposeSaliency:
    def test_zero_weights_zero_map(self):
        fmaps = np.random.default_rng(4).uniform(0, 1, size=(6, 4, 4))
        smap = compose_saliency(np.zeros(6), fmaps, (16, 16))
        np.testing.assert_array_equal(smap.raw, 0.0)
        np.testing.assert_array_equal(smap.normalized, 0.0)

    def test_single_channel_identity(self):
        fmap = np.random.default_rng(5).uniform(0, 1, size=(1, 4, 4))
        smap = compose_saliency([1.0], fmap, (4, 4))
        np.testing.assert_array_equal(smap.raw, fmap[0])

    def test_raw_nonnegative(self):
        rng = np.random.default_rng(6)
        smap = compose_saliency(
            rng.normal(size=8), rng.uniform(0, 1, size=(8, 4, 4)), (16, 16)
        )
        assert smap.raw.min() >= 0.0

    def test_weight_count_mismatch(self):
        with pytest.raises(ValueError, match="weight"):
            compose_saliency([1.0, 2.0], np.zeros((3, 4, 4)), (8, 8))

    @settings(max_examples=20)
    @given(st.floats(0.1, 100.0))
    def test_positive_scale_invariance(self, c):
        rng = np.random.default_rng(7)
        w = rng.normal(size=5)
        fmaps = rng.uniform(0, 1, size=(5, 4, 4))
        a = compose_saliency(w, fmaps, (8, 8)).normalized
        b = compose_saliency(w * c, fmaps, (8, 8)).normalized
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestGradCam:
    def test_gap_linear_head_weights_are_classifier_rows(self, model16, x16):
        # at the GAP input, dy_c/dA_ij == w[c,k]/Z, so alpha == w[c,k]/Z
        c = 2
        alpha = cam_weights(GradCam(), model16, x16, c, "gap_input")
        w = model16.param_by_name("head.w").data
        z = 4 * 4  # gap_input spatial size for 16x16 tinycnn
        np.testing.assert_allclose(alpha, w[c] / z, atol=1e-12)

    def test_weights_match_activation_fd(self, model16, x16):
        # oracle: finite differences over individual activation cells via
        # injection of a perturbed map
        c = 1
        layer = "gap_input"
        amap, grad = _logit_and_activation_grad(model16, x16, c, layer)
        h = 1e-5

        def logit_with(a):
            out = model16.forward(x16[None], inject={layer: a[None]})
            return out.logits.data[0, c]

        rng = np.random.default_rng(8)
        cells = [tuple(rng.integers(0, s) for s in amap.shape) for _ in range(12)]
        for cell in cells:
            bumped = amap.copy()
            bumped[cell] += h
            hi = logit_with(bumped)
            bumped[cell] -= 2 * h
            lo = logit_with(bumped)
            fd = (hi - lo) / (2 * h)
            assert abs(fd - grad[cell]) <= 1e-4 * max(1.0, abs(fd))

    def test_gradcam_equals_cam_by_weights_normalized(self, model16, x16):
        # CAM on a GAP->linear head: weights straight from the classifier
        c = 0
        smap = saliency_for(model16, x16, c, "gap_input", GradCam())
        fwd = model16.forward(x16[None])
        fmaps = fwd.feature_maps["gap_input"].data[0]
        cam = compose_saliency(
            model16.param_by_name("head.w").data[c], fmaps, x16.shape[1:]
        )
        np.testing.assert_allclose(smap.normalized, cam.normalized, atol=1e-9)

    def test_class_out_of_range(self, model16, x16):
        with pytest.raises(ValueError, match="class"):
            cam_weights(GradCam(), model16, x16, 99, "last_conv")

    def test_unknown_layer(self, model16, x16):
        with pytest.raises(ValueError, match="unknown layer"):
            cam_weights(GradCam(), model16, x16, 0, "blockX")


class TestGradCamPP:
    def test_matches_closed_form(self, model16, x16):
        c = 3
        alpha = cam_weights(GradCamPP(), model16, x16, c, "last_conv")
        amap, g = _logit_and_activation_grad(model16, x16, c, "last_conv")
        g2, g3 = g * g, g * g * g
        denom = 2.0 * g2 + amap.sum(axis=(1, 2))[:, None, None] * g3
        w = np.where(denom != 0, g2 / np.where(denom == 0, 1.0, denom), 0.0)
        want = (w * np.maximum(g, 0)).sum(axis=(1, 2))
        np.testing.assert_allclose(alpha, want, atol=1e-12)


class TestAxiomCam:
    def test_matches_formula(self, model16, x16):
        c = 1
        alpha = cam_weights(AxiomCam(), model16, x16, c, "last_conv")
        amap, g = _logit_and_activation_grad(model16, x16, c, "last_conv")
        sums = amap.sum(axis=(1, 2))
        want = np.where(sums != 0, (amap * g).sum(axis=(1, 2)) / np.where(sums == 0, 1, sums), 0)
        np.testing.assert_allclose(alpha, want, atol=1e-12)


class TestScoreCam:
    def test_exactly_k_forward_passes_per_image(self, model16, x16):
        method = ScoreCam()
        k = 16  # last_conv channels
        cam_weights(method, model16, x16, 0, "last_conv")  # warms baseline cache
        model16.forward_count = 0
        cam_weights(method, model16, x16, 0, "last_conv")
        assert model16.forward_count == k  # one scoring pass per channel

    def test_constant_channel_gets_zero_weight(self, model16, x16):
        # constant upsampled map normalizes to all zeros: masked input is
        # black, so the score difference against the black baseline vanishes
        method = ScoreCam()
        fwd = model16.forward(x16[None])
        amap = fwd.feature_maps["last_conv"].data[0].copy()
        amap[3] = 0.7  # constant channel

        class Inject:
            spec = model16.spec
            forward_count = 0

            def forward(self, x, tape=None, **kwargs):
                return model16.forward(x, tape, inject={"last_conv": amap[None]})

            def resolve_layer(self, name):
                return model16.resolve_layer(name)

        alpha = cam_weights(method, Inject(), x16, 0, "last_conv")
        assert alpha[3] == 0.0

    def test_bad_baseline_shape(self, model16, x16):
        method = ScoreCam(baseline=np.zeros((3, 8, 8)))
        with pytest.raises(ValueError, match="baseline"):
            cam_weights(method, model16, x16, 0, "last_conv")


class TestAblationCam:
    def test_matches_manual_ablation(self, model16, x16):
        c = 2
        alpha = cam_weights(AblationCam(), model16, x16, c, "last_conv")
        y = model16.forward(x16[None]).logits.data[0, c]
        for k in (0, 5, 11):
            y_abl = model16.forward(x16[None], ablate=("last_conv", k)).logits.data[0, c]
            assert alpha[k] == pytest.approx((y - y_abl) / y, abs=1e-12)


class TestInputGradientMap:
    def test_values_in_unit_range(self, model16, x16):
        for mode in (GradMode.STANDARD, GradMode.GUIDED):
            gmap = input_gradient_map(model16, x16, 1, mode)
            assert gmap.shape == (16, 16)
            assert gmap.min() >= 0.0 and gmap.max() <= 1.0

    def test_zero_gradient_constant_convention(self, model16):
        # head weights zero: CE gradient w.r.t. the input vanishes everywhere
        m = nn.build_model(nn.tinycnn((3, 16, 16), 4, (8, 16)), seed=1)
        m.param_by_name("head.w").data[:] = 0.0
        gmap = input_gradient_map(m, np.zeros((3, 16, 16)), 0)
        np.testing.assert_array_equal(gmap, 0.0)

    def test_guided_equals_standard_on_positive_path(self):
        # hand net where every backward signal reaching a ReLU is nonnegative:
        # positive conv weights and inputs, head row for the target zeroed so
        # the CE gradient entering the feature path is p_other * w_other >= 0
        m = nn.build_model(nn.tinycnn((1, 8, 8), 2, (3,)), seed=0)
        for p in m.params:
            p.data[:] = np.abs(p.data) + 0.05
        head = m.param_by_name("head.w")
        head.data[0, :] = 0.0
        m.param_by_name("head.b").data[:] = 0.0
        x = np.random.default_rng(9).uniform(0.2, 1.0, size=(1, 8, 8))
        g_std = input_gradient_map(m, x, 0, GradMode.STANDARD)
        g_gui = input_gradient_map(m, x, 0, GradMode.GUIDED)
        np.testing.assert_array_equal(g_std, g_gui)


class TestFactory:
    def test_make_method_names(self):
        for name in ("gradcam", "gradcampp", "scorecam", "ablationcam", "axiomcam"):
            assert make_method(name).name == name

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown saliency method"):
            make_method("limecam")

    def test_saliency_map_fields(self, model16, x16):
        smap = saliency_for(model16, x16, 2, "last_conv", GradCam())
        assert isinstance(smap, SaliencyMap)
        assert smap.method == "gradcam"
        assert smap.target_class == 2
        assert smap.raw.shape == (8, 8)
        assert smap.upsampled.shape == (16, 16)
        assert smap.raw.min() >= 0.0
