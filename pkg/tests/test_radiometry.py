import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdrfuse.errors import NonPositiveExposure, ShapeMismatch
from hdrfuse.metrics import psnr
from hdrfuse.radiometry import (
    MU_DEFAULT,
    WEIGHT_FLOOR,
    TonemapParams,
    brightness_normalize,
    deghost_classical,
    exposure_compensate,
    ldr_to_hdr_domain,
    merge_triangle,
    merge_triangle_arrays,
    mu_law_grad,
    mu_law_tonemap,
    reinhard_tonemap,
    replace_dynamic_with_reference,
    triangle_weight,
)
from hdrfuse.stack_io import ExposureStack, MotionMask, synth_scene

EV3 = [-2.0, 0.0, 2.0]


class TestConversions:
    def test_tonemap_params_validation(self):
        TonemapParams()
        with pytest.raises(ValueError):
            TonemapParams(mu=0.0)
        with pytest.raises(ValueError):
            TonemapParams(gamma=-1.0)

    def test_ldr_to_hdr_closed_form(self):
        out = ldr_to_hdr_domain(np.array([0.5]), exposure_time=0.25)
        assert out[0] == pytest.approx(0.5**2.2 / 0.25, rel=1e-12)
        assert ldr_to_hdr_domain(np.array([1.0]), 4.0)[0] == pytest.approx(0.25)
        assert ldr_to_hdr_domain(np.array([0.0]), 4.0)[0] == 0.0

    def test_nonpositive_exposure_rejected(self):
        with pytest.raises(NonPositiveExposure):
            ldr_to_hdr_domain(np.ones(3), 0.0)
        with pytest.raises(NonPositiveExposure):
            ldr_to_hdr_domain(np.ones(3), -1.0)

    def test_exposure_compensate_is_pure_gain(self):
        x = np.array([0.2, 5.0])
        assert np.allclose(exposure_compensate(x, 0.0, 2.0), x * 4.0, rtol=1e-12)
        assert np.allclose(exposure_compensate(x, 1.0, -1.0), x / 4.0, rtol=1e-12)
        assert np.array_equal(exposure_compensate(x, 3.0, 3.0), x)
        # no clamping: values above 1 pass through
        assert exposure_compensate(np.array([0.9]), 0.0, 4.0)[0] == pytest.approx(14.4)

    def test_brightness_normalize_closed_form(self):
        out = brightness_normalize(np.array([0.2]), ev_src=-2.0, ev_ref=0.0)
        assert out[0] == pytest.approx(0.2 * 4.0 ** (1 / 2.2), rel=1e-9)

    def test_brightness_normalize_identity_and_clamp(self):
        x = np.linspace(0, 1, 11)
        assert np.allclose(brightness_normalize(x, 0.0, 0.0), x, atol=1e-12)
        out = brightness_normalize(np.array([0.9]), -4.0, 0.0)
        assert out[0] == 1.0

    def test_brightness_normalize_inverts_below_saturation(self):
        x = np.linspace(0.05, 0.4, 8)
        there = brightness_normalize(x, 0.0, 1.5)
        assert there.max() < 1.0
        back = brightness_normalize(there, 1.5, 0.0)
        assert np.allclose(back, x, rtol=1e-9)


class TestTonemaps:
    def test_mu_law_endpoints(self):
        assert mu_law_tonemap(np.array([0.0]), peak=2.0)[0] == 0.0
        assert mu_law_tonemap(np.array([2.0]), peak=2.0)[0] == pytest.approx(1.0, abs=1e-15)

    def test_mu_law_peak_none_uses_image_max(self):
        x = np.array([0.0, 1.0, 7.5])
        out = mu_law_tonemap(x)
        assert out[-1] == pytest.approx(1.0, abs=1e-15)
        assert np.allclose(out, mu_law_tonemap(x, peak=7.5), atol=0)

    def test_mu_law_all_zero_image(self):
        out = mu_law_tonemap(np.zeros((4, 4, 3)))
        assert np.array_equal(out, np.zeros((4, 4, 3)))

    def test_mu_law_monotone(self):
        rng = np.random.default_rng(0)
        x = np.sort(rng.uniform(0, 10, size=10000))
        t = mu_law_tonemap(x, peak=10.0)
        assert np.all(np.diff(t) >= 0)
        assert np.all(np.diff(t)[np.diff(x) > 1e-12] > 0)

    def test_mu_law_grad_matches_finite_differences(self):
        peak, mu = 3.7, MU_DEFAULT
        for x in [0.05, 0.3, 2.5]:
            h = 1e-7 * x
            fd = (
                mu_law_tonemap(np.array([x + h]), mu, peak)[0]
                - mu_law_tonemap(np.array([x - h]), mu, peak)[0]
            ) / (2 * h)
            an = mu_law_grad(np.array([x]), mu, peak)[0]
            assert an == pytest.approx(fd, rel=1e-6)
        # one-sided at the boundary; truncation is O(h), so keep h tiny
        h = 1e-10
        fd0 = mu_law_tonemap(np.array([h]), mu, peak)[0] / h
        assert mu_law_grad(np.array([0.0]), mu, peak)[0] == pytest.approx(fd0, rel=1e-4)

    def test_mu_law_grad_at_zero(self):
        assert mu_law_grad(np.array([0.0]))[0] == pytest.approx(
            MU_DEFAULT / np.log1p(MU_DEFAULT), rel=1e-12
        )

    def test_reinhard(self):
        assert reinhard_tonemap(np.array([0.0]))[0] == 0.0
        assert reinhard_tonemap(np.array([1.0]))[0] == 0.5
        x = np.linspace(0, 1000, 101)
        out = reinhard_tonemap(x)
        assert np.all((out >= 0) & (out < 1))
        assert np.all(np.diff(out) > 0)

    @given(st.floats(0, 100), st.floats(1e-3, 100))
    @settings(max_examples=50, deadline=None)
    def test_mu_law_bounded_property(self, x, extra):
        peak = x + extra
        v = mu_law_tonemap(np.array([x]), peak=peak)[0]
        assert 0.0 <= v < 1.0


class TestTriangleWeight:
    def test_endpoints_and_peak(self):
        assert triangle_weight(0.0) == pytest.approx(WEIGHT_FLOOR, abs=0)
        assert triangle_weight(1.0) == pytest.approx(WEIGHT_FLOOR, abs=1e-18)
        assert triangle_weight(0.5) == pytest.approx(0.5 + WEIGHT_FLOOR, abs=0)

    def test_symmetry_and_shape(self):
        z = np.linspace(0, 1, 101)
        w = triangle_weight(z)
        assert np.allclose(w, triangle_weight(1.0 - z), atol=1e-12)
        assert np.all(np.diff(w[z <= 0.5]) > 0)
        assert np.all(np.diff(w[z >= 0.5]) < 0)
        assert np.all(w > 0)

    @given(st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_weight_bounds_property(self, z):
        w = float(triangle_weight(z))
        assert WEIGHT_FLOOR <= w <= 0.5 + WEIGHT_FLOOR


class TestMerge:
    def test_single_frame_merge_is_linearization(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, size=(8, 8, 3))
        merged = merge_triangle_arrays([img], [0.5])
        assert np.allclose(merged, ldr_to_hdr_domain(img, 0.5), rtol=1e-12)

    def test_weights_average_linearizations(self):
        # two frames of the same scene at t=1 and t=4, both mid-gray: the
        # merge must return the common radiance exactly
        radiance = 0.1
        imgs = [np.full((4, 4, 3), (radiance * t) ** (1 / 2.2)) for t in (1.0, 4.0)]
        merged = merge_triangle_arrays(imgs, [1.0, 4.0])
        assert np.allclose(merged, radiance, rtol=1e-9)

    def test_static_scene_recovery(self, static64):
        stack, gt, _ = static64
        merged = merge_triangle(stack)
        err = np.abs(merged.values - gt.values)
        assert err.max() < 1e-4
        well = (gt.values > 1e-3) & (gt.values < 0.99)
        rel = (err / np.maximum(gt.values, 1e-12))[well]
        assert rel.max() < 1e-4

    def test_saturated_pixels_fall_back_to_short_exposure(self):
        # radiance 1.0: saturated at t=1 and t=4, readable at t=0.25
        imgs = [np.full((4, 4, 3), min((1.0 * t) ** (1 / 2.2), 1.0)) for t in (0.25, 1.0, 4.0)]
        merged = merge_triangle_arrays(imgs, [0.25, 1.0, 4.0])
        assert np.allclose(merged, 1.0, rtol=1e-4)


class TestDeghost:
    def _toy_stack(self):
        ref = np.full((6, 6, 3), 0.4)
        src = np.full((6, 6, 3), 0.8)
        lo = np.full((6, 6, 3), 0.2)
        return ExposureStack(images=[lo, ref, src], ev_bias=EV3, reference_index=1)

    def test_masked_pixels_become_compensated_reference(self):
        stack = self._toy_stack()
        m = np.zeros((6, 6))
        m[2:4, 2:4] = 1.0
        out = replace_dynamic_with_reference(stack, [MotionMask(m, source_index=2)])
        comp = 0.4 * 4.0 ** (1 / 2.2)
        assert np.allclose(out.images[2][2:4, 2:4], comp, rtol=1e-9)
        assert np.allclose(out.images[2][0, 0], 0.8, atol=0)
        # untouched frames are copies, not views
        assert np.array_equal(out.images[0], stack.images[0])
        assert out.images[0] is not stack.images[0]
        assert np.array_equal(out.images[1], stack.images[1])

    def test_soft_mask_blends(self):
        stack = self._toy_stack()
        m = np.full((6, 6), 0.5)
        out = replace_dynamic_with_reference(stack, [MotionMask(m, source_index=2)])
        comp = 0.4 * 4.0 ** (1 / 2.2)
        assert np.allclose(out.images[2], 0.5 * 0.8 + 0.5 * comp, rtol=1e-9)

    def test_mask_shape_mismatch(self):
        stack = self._toy_stack()
        with pytest.raises(ShapeMismatch):
            replace_dynamic_with_reference(stack, [MotionMask(np.zeros((3, 3)), source_index=2)])

    def test_zero_masks_reduce_to_plain_merge(self, scene64):
        stack, _, _ = scene64
        zeros = [MotionMask(np.zeros((64, 64)), source_index=i) for i in (0, 2)]
        a = deghost_classical(stack, zeros)
        b = merge_triangle(stack)
        assert np.array_equal(a.values, b.values)

    def test_ground_truth_masks_remove_ghosts(self, scene64):
        stack, gt, masks = scene64
        ghosted = merge_triangle(stack)
        deghosted = deghost_classical(stack, masks)
        peak = float(gt.values.max())
        assert psnr(deghosted.values / peak, gt.values / peak) > 40.0
        assert psnr(deghosted.values / peak, gt.values / peak) > psnr(
            ghosted.values / peak, gt.values / peak
        )
