"""Motion segmentation: thresholded-difference baseline, a small U-shaped CNN
segmenter, and the two-annotator mask merge protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadConfig, BadSpatialDims, ShapeMismatch, SoftMaskRejected
from .nets import act, glorot_init, make_conv
from .radiometry import brightness_normalize
from .stack_io import GAMMA_DEFAULT, ExposureStack, MotionMask

DIFF_THRESHOLD_DEFAULT = 0.1
SATURATION_HI = 0.99
SATURATION_LO = 0.01


@dataclass
class SegmenterConfig:
    base_channels: int = 16
    depth: int = 3
    threshold: float = 0.5

    def __post_init__(self):
        if self.base_channels < 4:
            raise BadConfig(f"base_channels must be >= 4, got {self.base_channels}")
        if self.depth < 1:
            raise BadConfig(f"depth must be >= 1, got {self.depth}")
        if not (0.0 < self.threshold < 1.0):
            raise BadConfig(f"threshold must lie in (0,1), got {self.threshold}")


def diff_segment(
    src: np.ndarray,
    ref: np.ndarray,
    ev_src: float,
    ev_ref: float,
    tau: float = DIFF_THRESHOLD_DEFAULT,
    gamma: float = GAMMA_DEFAULT,
) -> MotionMask:
    """Threshold the difference between the brightness-normalized source and
    the reference.

    A pixel is dynamic when the max-over-channels absolute difference exceeds
    tau. Pixels saturated in both images (all channels >= 0.99 or all <= 0.01)
    are forced to static: saturation differences are not evidence of motion.
    """
    src, ref = np.asarray(src, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if src.shape != ref.shape:
        raise ShapeMismatch(f"{src.shape} vs {ref.shape}")
    bn = brightness_normalize(src, ev_src, ev_ref, gamma)
    diff = np.abs(bn - ref).max(axis=2)
    mask = (diff > tau).astype(np.float64)
    # saturation in either the source's own exposure domain or after
    # normalization means the pixel carries no motion evidence
    src_hi = np.all(bn >= SATURATION_HI, axis=2) | np.all(src >= SATURATION_HI, axis=2)
    src_lo = np.all(bn <= SATURATION_LO, axis=2) | np.all(src <= SATURATION_LO, axis=2)
    both_hi = src_hi & np.all(ref >= SATURATION_HI, axis=2)
    both_lo = src_lo & np.all(ref <= SATURATION_LO, axis=2)
    mask[both_hi | both_lo] = 0.0
    return MotionMask(values=mask)


def diff_segment_stack(stack: ExposureStack, tau: float = DIFF_THRESHOLD_DEFAULT) -> list[MotionMask]:
    """One mask per non-reference frame, against the reference."""
    ref = stack.images[stack.reference_index]
    ev_ref = stack.ev_bias[stack.reference_index]
    masks = []
    for k in stack.non_reference_indices():
        m = diff_segment(stack.images[k], ref, stack.ev_bias[k], ev_ref, tau)
        masks.append(MotionMask(values=m.values, source_index=k))
    return masks


class SegNet(nn.Module):
    """U-shaped encoder-decoder on a 6-channel (source + reference) input.

    Stride-2 convolutions downsample, bilinear interpolation upsamples,
    skip links concatenate, and a sigmoid head emits a soft motion map.
    """

    def __init__(self, config: SegmenterConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config or SegmenterConfig()
        c = self.config.base_channels
        d = self.config.depth
        g = generator
        self.stem = make_conv(6, c, generator=g)
        downs, ups = [], []
        chans = [c * (2**i) for i in range(d + 1)]
        for i in range(d):
            downs.append(make_conv(chans[i], chans[i + 1], stride=2, generator=g))
        self.bottleneck = make_conv(chans[d], chans[d], generator=g)
        for i in reversed(range(d)):
            ups.append(make_conv(chans[i + 1] + chans[i], chans[i], generator=g))
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.head = make_conv(c, 1, generator=g)

    def forward_logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 6:
            raise ShapeMismatch(f"expected Nx6xHxW, got {tuple(x.shape)}")
        step = 2**self.config.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise BadSpatialDims(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {step}"
            )
        y = act(self.stem(x))
        skips = []
        for down in self.downs:
            skips.append(y)
            y = act(down(y))
        y = act(self.bottleneck(y))
        for up, skip in zip(self.ups, reversed(skips)):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            y = act(up(torch.cat([y, skip], dim=1)))
        return self.head(y)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.forward_logits(x))


def pair_tensor(src: np.ndarray, ref: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Stack a (source, reference) LDR pair into a 1x6xHxW tensor."""
    if src.shape != ref.shape:
        raise ShapeMismatch(f"{src.shape} vs {ref.shape}")
    joint = np.concatenate([src, ref], axis=2).transpose(2, 0, 1)[None]
    return torch.as_tensor(np.ascontiguousarray(joint), dtype=dtype)


def seg_forward(model: SegNet, src: np.ndarray, ref: np.ndarray) -> MotionMask:
    """Soft motion mask for one (source, reference) pair."""
    x = pair_tensor(src, ref, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        y = model(x)
    return MotionMask(values=y[0, 0].cpu().numpy().astype(np.float64))


def seg_forward_stack(model: SegNet, stack: ExposureStack) -> list[MotionMask]:
    ref = stack.images[stack.reference_index]
    out = []
    for k in stack.non_reference_indices():
        m = seg_forward(model, stack.images[k], ref)
        out.append(MotionMask(values=m.values, source_index=k))
    return out


def hard_mask(m: MotionMask, tau: float = 0.5) -> MotionMask:
    return MotionMask(values=(m.values > tau).astype(np.float64), source_index=m.source_index)


def merge_annotations(a: MotionMask, b: MotionMask) -> tuple[MotionMask, MotionMask]:
    """Union of two annotators' hard masks, plus their disagreement map.

    The mismatch mask marks pixels only one annotator labeled, the regions a
    final annotator would inspect.
    """
    if not a.is_hard or not b.is_hard:
        raise SoftMaskRejected("merge_annotations expects hard (0/1) masks")
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"{a.values.shape} vs {b.values.shape}")
    merged = np.maximum(a.values, b.values)
    mismatch = np.abs(a.values - b.values)
    return MotionMask(values=merged, source_index=a.source_index), MotionMask(
        values=mismatch, source_index=a.source_index
    )
