"""Linear/LDR conversions, exposure compensation, tonemapping and the
classical triangle-weighted exposure merge baselines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveExposure, ShapeMismatch
from .stack_io import ExposureStack, MotionMask, RadianceImage

MU_DEFAULT = 5000.0
WEIGHT_FLOOR = 1e-6


@dataclass
class TonemapParams:
    mu: float = MU_DEFAULT
    gamma: float = 2.2

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


def ldr_to_hdr_domain(image: np.ndarray, exposure_time: float, gamma: float = 2.2) -> np.ndarray:
    """Linearize an LDR image and divide out its exposure: image**gamma / t."""
    if exposure_time <= 0:
        raise NonPositiveExposure(f"exposure time {exposure_time}")
    return np.asarray(image) ** gamma / exposure_time


def exposure_compensate(linear: np.ndarray, ev_src: float, ev_dst: float) -> np.ndarray:
    """Rescale a linear-domain image from one EV to another (no clamping)."""
    return np.asarray(linear) * 2.0 ** (ev_dst - ev_src)


def brightness_normalize(
    src: np.ndarray, ev_src: float, ev_ref: float, gamma: float = 2.2
) -> np.ndarray:
    """Map an LDR image to the reference exposure's brightness, clamped to [0,1]."""
    src = np.asarray(src)
    return np.clip((src**gamma * 2.0 ** (ev_ref - ev_src)) ** (1.0 / gamma), 0.0, 1.0)


def mu_law_tonemap(values: np.ndarray, mu: float = MU_DEFAULT, peak: float | None = None) -> np.ndarray:
    """Log-compress a nonnegative linear image: log(1 + mu*x) / log(1 + mu)
    with x = values / peak.

    ``peak=None`` normalizes by the image max (evaluation convention); training
    passes a fixed peak so the loss is stationary. An all-zero image maps to
    all zeros without dividing.
    """
    values = np.asarray(values)
    if peak is None:
        peak = float(values.max()) if values.size else 0.0
        if peak <= 0.0:
            return np.zeros_like(values, dtype=np.float64)
    return np.log1p(mu * (values / peak)) / np.log1p(mu)


def mu_law_grad(values: np.ndarray, mu: float = MU_DEFAULT, peak: float = 1.0) -> np.ndarray:
    """Analytic derivative of mu_law_tonemap at fixed peak."""
    values = np.asarray(values)
    return (mu / peak) / (np.log1p(mu) * (1.0 + mu * values / peak))


def reinhard_tonemap(values: np.ndarray) -> np.ndarray:
    """Global x/(1+x) range compression, per channel; bounded in [0,1)."""
    values = np.asarray(values)
    return values / (1.0 + values)


def triangle_weight(z):
    """Hat weighting peaking at mid-gray, floored at 1e-6 so merges never
    divide by zero: w(0)=w(1)=eps, w(0.5)=0.5+eps."""
    z = np.asarray(z)
    return np.where(z <= 0.5, z, 1.0 - z) + WEIGHT_FLOOR


def merge_triangle_arrays(images, exposure_times, gamma: float = 2.2) -> np.ndarray:
    """Triangle-weighted merge of aligned LDR frames into linear radiance:
    sum_k w(I_k) I_k**gamma / t_k / sum_k w(I_k). Accepts any K >= 1."""
    num = 0.0
    den = 0.0
    for img, t in zip(images, exposure_times):
        w = triangle_weight(np.asarray(img))
        num = num + w * ldr_to_hdr_domain(img, t, gamma)
        den = den + w
    return num / den


def merge_triangle(stack: ExposureStack, gamma: float = 2.2) -> RadianceImage:
    """Classical static merge of a stack (assumes no scene motion)."""
    return RadianceImage(merge_triangle_arrays(stack.images, stack.exposure_times, gamma))


def replace_dynamic_with_reference(
    stack: ExposureStack, masks: list[MotionMask], gamma: float = 2.2
) -> ExposureStack:
    """Build a static stack by overwriting each source's moving pixels with
    exposure-compensated reference pixels (the classical deghosting step)."""
    ref = stack.images[stack.reference_index]
    ev_ref = stack.ev_bias[stack.reference_index]
    by_source = {m.source_index: m for m in masks}
    images = []
    for k, img in enumerate(stack.images):
        if k == stack.reference_index or k not in by_source:
            images.append(img.copy())
            continue
        m = by_source[k].values
        if m.shape != img.shape[:2]:
            raise ShapeMismatch(f"mask {m.shape} vs image {img.shape[:2]}")
        comp = brightness_normalize(ref, ev_ref, stack.ev_bias[k], gamma)
        images.append(img * (1.0 - m[:, :, None]) + comp * m[:, :, None])
    return ExposureStack(
        images=images, ev_bias=list(stack.ev_bias), reference_index=stack.reference_index
    )


def deghost_classical(
    stack: ExposureStack, masks: list[MotionMask], gamma: float = 2.2
) -> RadianceImage:
    """Mask-guided static-ification followed by a triangle merge."""
    return merge_triangle(replace_dynamic_with_reference(stack, masks, gamma), gamma)
