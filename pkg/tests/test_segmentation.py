import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import finite_difference_check
from hdrfuse.errors import BadConfig, BadSpatialDims, ShapeMismatch, SoftMaskRejected
from hdrfuse.metrics import iou
from hdrfuse.segmentation import (
    SegmenterConfig,
    SegNet,
    diff_segment,
    diff_segment_stack,
    hard_mask,
    merge_annotations,
    pair_tensor,
    seg_forward,
    seg_forward_stack,
)
from hdrfuse.stack_io import (
    DatasetManifest,
    MotionMask,
    SceneRecord,
    load_scene,
    save_manifest,
    synth_scene,
    write_scene,
)

EV3 = [-2.0, 0.0, 2.0]


class TestSegmenterConfig:
    def test_defaults(self):
        cfg = SegmenterConfig()
        assert cfg.base_channels == 16 and cfg.depth == 3 and cfg.threshold == 0.5

    def test_validation(self):
        with pytest.raises(BadConfig):
            SegmenterConfig(base_channels=2)
        with pytest.raises(BadConfig):
            SegmenterConfig(depth=0)
        with pytest.raises(BadConfig):
            SegmenterConfig(threshold=0.0)
        with pytest.raises(BadConfig):
            SegmenterConfig(threshold=1.0)


class TestDiffSegment:
    def test_identical_frames_are_static(self):
        img = np.random.default_rng(0).uniform(0.1, 0.9, size=(8, 8, 3))
        m = diff_segment(img, img, 0.0, 0.0)
        assert m.area() == 0.0

    def test_large_difference_is_dynamic(self):
        ref = np.full((8, 8, 3), 0.3)
        src = np.full((8, 8, 3), 0.55)
        assert diff_segment(src, ref, 0.0, 0.0).area() == 64.0

    def test_subthreshold_difference_is_static(self):
        ref = np.full((8, 8, 3), 0.3)
        src = np.full((8, 8, 3), 0.35)
        assert diff_segment(src, ref, 0.0, 0.0).area() == 0.0

    def test_exposure_change_alone_is_static(self):
        # same radiance rendered at two EVs must not read as motion
        radiance = 0.1
        ref = np.full((8, 8, 3), radiance ** (1 / 2.2))
        src = np.full((8, 8, 3), (radiance * 4.0) ** (1 / 2.2))
        assert diff_segment(src, ref, 2.0, 0.0).area() == 0.0

    def test_both_saturated_high_is_static(self):
        ref = np.ones((8, 8, 3))
        src = np.ones((8, 8, 3))
        assert diff_segment(src, ref, 2.0, 0.0).area() == 0.0

    def test_source_saturated_raw_but_dim_after_normalization(self):
        # bright exposure clips to 1.0; normalizing to a darker reference
        # dims it below the saturation test, yet both frames saw the same
        # overexposed region, so it must stay static
        ref = np.ones((8, 8, 3))
        src = np.ones((8, 8, 3))
        m = diff_segment(src, ref, ev_src=2.0, ev_ref=0.0)
        assert m.area() == 0.0

    def test_reference_saturated_source_readable_is_static(self):
        # radiance 1.0: reference clips, the short exposure reads 0.533 and
        # normalizes back up to 1.0; saturation, not motion
        ref = np.ones((8, 8, 3))
        src = np.full((8, 8, 3), 0.25 ** (1 / 2.2))
        assert diff_segment(src, ref, -2.0, 0.0).area() == 0.0

    def test_both_dark_is_static(self):
        ref = np.full((8, 8, 3), 0.005)
        src = np.zeros((8, 8, 3))
        assert diff_segment(src, ref, 0.0, 0.0, tau=0.001).area() == 0.0

    def test_motion_in_front_of_saturation_is_dynamic(self):
        ref = np.ones((8, 8, 3))
        src = np.full((8, 8, 3), 0.2)
        assert diff_segment(src, ref, 0.0, 0.0).area() == 64.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            diff_segment(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), 0.0, 0.0)

    def test_recovers_synthetic_ground_truth(self, scene64):
        stack, _, gt_masks = scene64
        masks = diff_segment_stack(stack)
        assert [m.source_index for m in masks] == [0, 2]
        for got, want in zip(masks, gt_masks):
            assert iou(got, want) >= 0.95

    def test_survives_8bit_quantization(self, tmp_path):
        stack, gt, gt_masks = synth_scene(4, 64, 64, 3, EV3)
        rec = SceneRecord(stack=stack, gt_hdr=gt, gt_masks=gt_masks, scene_id="s")
        entry = write_scene(rec, tmp_path / "s")
        save_manifest(DatasetManifest(entries=[entry]), tmp_path / "m.json")
        reloaded = load_scene(entry, tmp_path)
        for got, want in zip(diff_segment_stack(reloaded.stack), gt_masks):
            assert iou(got, want) >= 0.95


class TestSegNet:
    def _model(self, seed=0, **kw):
        g = torch.Generator().manual_seed(seed)
        return SegNet(SegmenterConfig(base_channels=8, depth=2, **kw), generator=g)

    def test_output_shape_and_range(self):
        model = self._model()
        x = torch.rand(2, 6, 32, 48, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            y = model(x)
        assert y.shape == (2, 1, 32, 48)
        assert float(y.min()) > 0.0 and float(y.max()) < 1.0

    def test_forward_is_sigmoid_of_logits(self):
        model = self._model()
        x = torch.rand(1, 6, 16, 16, generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            assert torch.equal(model(x), torch.sigmoid(model.forward_logits(x)))

    def test_seeded_init_is_deterministic(self):
        x = torch.rand(1, 6, 16, 16, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            a, b, c = self._model(5)(x), self._model(5)(x), self._model(6)(x)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_depth_sets_divisibility_requirement(self):
        model = self._model()  # depth 2: dims must divide by 4
        with pytest.raises(BadSpatialDims):
            model(torch.rand(1, 6, 30, 32))
        deep = SegNet(SegmenterConfig(base_channels=8, depth=3))
        with pytest.raises(BadSpatialDims):
            deep(torch.rand(1, 6, 36, 64))
        deep(torch.rand(1, 6, 32, 64))  # 32 divides by 8

    def test_wrong_channel_count(self):
        with pytest.raises(ShapeMismatch):
            self._model()(torch.rand(1, 5, 16, 16))
        with pytest.raises(ShapeMismatch):
            self._model()(torch.rand(6, 16, 16))

    def test_gradients_match_finite_differences(self):
        g = torch.Generator().manual_seed(4)
        model = SegNet(SegmenterConfig(base_channels=4, depth=1), generator=g).double()
        x = torch.rand(1, 6, 8, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
        target = torch.rand(1, 1, 8, 8, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
        params = [p for p in model.parameters() if p.requires_grad]

        def loss_fn():
            return torch.nn.functional.binary_cross_entropy_with_logits(
                model.forward_logits(x), target
            )

        worst, checked, _ = finite_difference_check(loss_fn, params, n_per_tensor=3, rtol=1e-3)
        assert worst < 1e-3
        assert checked >= 10


class TestPairsAndForward:
    def test_pair_tensor_layout(self):
        src = np.zeros((4, 5, 3))
        ref = np.ones((4, 5, 3))
        x = pair_tensor(src, ref)
        assert x.shape == (1, 6, 4, 5)
        assert x.dtype == torch.float32
        assert torch.equal(x[0, :3], torch.zeros(3, 4, 5))
        assert torch.equal(x[0, 3:], torch.ones(3, 4, 5))

    def test_pair_tensor_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            pair_tensor(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_seg_forward_returns_soft_mask(self, scene64):
        stack, _, _ = scene64
        model = SegNet(SegmenterConfig(base_channels=8, depth=2), generator=torch.Generator().manual_seed(0))
        m = seg_forward(model, stack.images[0], stack.images[1])
        assert m.values.shape == (64, 64)
        assert m.values.dtype == np.float64
        assert 0.0 <= m.values.min() and m.values.max() <= 1.0

    def test_seg_forward_stack_indices(self, scene64):
        stack, _, _ = scene64
        model = SegNet(SegmenterConfig(base_channels=8, depth=2), generator=torch.Generator().manual_seed(0))
        masks = seg_forward_stack(model, stack)
        assert [m.source_index for m in masks] == [0, 2]


class TestMaskOps:
    def test_hard_mask_thresholds(self):
        m = MotionMask(np.array([[0.2, 0.5, 0.8]]), source_index=2)
        h = hard_mask(m)
        assert np.array_equal(h.values, [[0.0, 0.0, 1.0]])  # 0.5 is not above tau
        assert h.source_index == 2
        assert hard_mask(m, tau=0.1).area() == 3.0
        assert hard_mask(m, tau=0.6).area() == 1.0

    def test_hard_mask_idempotent(self):
        rng = np.random.default_rng(1)
        m = MotionMask(rng.uniform(size=(16, 16)))
        once = hard_mask(m)
        twice = hard_mask(once)
        assert once.is_hard
        assert np.array_equal(once.values, twice.values)

    def test_merge_union_and_disagreement(self):
        a = MotionMask(np.array([[1.0, 1.0, 0.0, 0.0]]), source_index=0)
        b = MotionMask(np.array([[1.0, 0.0, 1.0, 0.0]]), source_index=0)
        merged, mismatch = merge_annotations(a, b)
        assert np.array_equal(merged.values, [[1.0, 1.0, 1.0, 0.0]])
        assert np.array_equal(mismatch.values, [[0.0, 1.0, 1.0, 0.0]])
        assert merged.source_index == 0

    def test_merge_rejects_soft_masks(self):
        soft = MotionMask(np.full((4, 4), 0.5))
        hard = MotionMask(np.ones((4, 4)))
        with pytest.raises(SoftMaskRejected):
            merge_annotations(soft, hard)
        with pytest.raises(SoftMaskRejected):
            merge_annotations(hard, soft)

    def test_merge_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            merge_annotations(MotionMask(np.ones((4, 4))), MotionMask(np.ones((4, 5))))

    @given(
        a=hnp.arrays(dtype=np.float64, shape=(8, 8), elements=st.sampled_from([0.0, 1.0])),
        b=hnp.arrays(dtype=np.float64, shape=(8, 8), elements=st.sampled_from([0.0, 1.0])),
    )
    @settings(max_examples=30, deadline=None)
    def test_merge_properties(self, a, b):
        ma, mb = MotionMask(a), MotionMask(b)
        merged, mismatch = merge_annotations(ma, mb)
        assert merged.is_hard and mismatch.is_hard
        # union dominates both inputs; disagreement is the symmetric difference
        assert merged.area() >= max(ma.area(), mb.area())
        both = float(np.sum((a > 0.5) & (b > 0.5)))
        assert merged.area() == ma.area() + mb.area() - both
        assert mismatch.area() == ma.area() + mb.area() - 2 * both
