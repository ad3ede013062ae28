"""Exposure stacks, motion masks and radiance images: in-memory types, the
on-disk formats (PFM for HDR, 8-bit PNG for LDR frames and masks, JSON
manifests) and a deterministic synthetic scene generator for desk-scale runs.

PFM layout: ``PF\\n{width} {height}\\n-1.0\\n`` followed by float32 RGB
scanlines, bottom row first, little-endian (negative scale token).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    BadConfig,
    BadEV,
    CorruptHeader,
    IOFailure,
    MissingFile,
    ShapeMismatch,
    WrongChannelCount,
)

GAMMA_DEFAULT = 2.2
REFERENCE_EXPOSURE = 1.0  # seconds; EV offsets are relative to this


@dataclass
class ExposureStack:
    """Ordered bracketed LDR frames of one scene.

    ``images`` are HxWx3 floats in [0, 1], ``ev_bias`` is strictly increasing,
    and exposure times are derived as t_k = t_ref * 2**(ev_k - ev_ref) with
    t_ref = 1s by convention.
    """

    images: list[np.ndarray]
    ev_bias: list[float]
    reference_index: int
    exposure_times: list[float] = field(init=False)

    def __post_init__(self):
        k = len(self.images)
        if k < 2:
            raise BadConfig(f"need at least 2 images, got {k}")
        if len(self.ev_bias) != k:
            raise BadEV(f"EV list length {len(self.ev_bias)} != image count {k}")
        if any(b >= a for a, b in zip(self.ev_bias[1:], self.ev_bias[:-1])):
            raise BadEV(f"ev_bias must be strictly increasing, got {self.ev_bias}")
        if not 0 <= self.reference_index < k:
            raise BadConfig(f"reference_index {self.reference_index} out of [0,{k})")
        shape = self.images[0].shape
        for i, img in enumerate(self.images):
            if img.ndim != 3 or img.shape[2] != 3:
                raise ShapeMismatch(f"image {i} is not HxWx3: {img.shape}")
            if img.shape != shape:
                raise ShapeMismatch(f"image {i} shape {img.shape} != {shape}")
        self.images = [np.clip(img, 0.0, 1.0) for img in self.images]
        ev_ref = self.ev_bias[self.reference_index]
        self.exposure_times = [
            REFERENCE_EXPOSURE * 2.0 ** (ev - ev_ref) for ev in self.ev_bias
        ]

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images[0].shape[0]

    @property
    def width(self) -> int:
        return self.images[0].shape[1]

    def peak_radiance(self) -> float:
        """Largest linear value any frame can encode: 1 / min exposure time."""
        return 1.0 / min(self.exposure_times)

    def non_reference_indices(self) -> list[int]:
        return [i for i in range(self.num_images) if i != self.reference_index]


@dataclass
class MotionMask:
    """Per-pixel membership in the moving region, against the reference frame.

    ``source_index`` names the non-reference frame this mask belongs to;
    -1 means unknown (e.g. a mask loaded standalone from disk).
    """

    values: np.ndarray
    source_index: int = -1

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeMismatch(f"mask must be HxW, got {self.values.shape}")
        self.values = np.clip(self.values, 0.0, 1.0)

    @property
    def is_hard(self) -> bool:
        v = self.values
        return bool(np.all((v == 0.0) | (v == 1.0)))

    def area(self) -> float:
        return float(self.values.sum())


@dataclass
class RadianceImage:
    """Linear-domain HDR image, nonnegative finite floats, HxWx3."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ShapeMismatch(f"radiance image must be HxWx3, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("radiance image contains non-finite values")
        if (self.values < 0).any():
            raise ValueError("radiance image contains negative values")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ManifestEntry:
    stack_dir: str
    ev_bias: list[float]
    reference_index: int
    gt_hdr: str | None = None
    gt_masks: list[str] | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"


@dataclass
class SceneRecord:
    """One training/eval example: a stack plus optional ground truth."""

    stack: ExposureStack
    gt_hdr: RadianceImage | None = None
    gt_masks: list[MotionMask] | None = None  # non-reference frames, index order
    scene_id: str = ""


# ---------------------------------------------------------------------------
# PFM


def save_hdr(img: RadianceImage, path) -> None:
    """Write a radiance image as little-endian float32 PFM."""
    values = np.ascontiguousarray(img.values.astype(np.float32, copy=False))
    h, w, _ = values.shape
    try:
        with open(path, "wb") as f:
            f.write(b"PF\n")
            f.write(f"{w} {h}\n".encode("ascii"))
            f.write(b"-1.0\n")
            f.write(values[::-1].tobytes())  # bottom scanline first
    except OSError as e:
        raise IOFailure(f"cannot write PFM {path}: {e}") from e


def load_hdr(path) -> RadianceImage:
    """Read a PFM radiance image. Round-trips save_hdr bit-exactly."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except OSError as e:
        raise IOFailure(f"cannot read PFM {path}: {e}") from e

    def next_token(buf, pos):
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeader(f"{path}: truncated header")
        return buf[start:pos], pos + 1

    magic, pos = next_token(data, 0)
    if magic != b"PF":
        raise CorruptHeader(f"{path}: bad magic {magic!r} (only 3-channel PF supported)")
    try:
        wtok, pos = next_token(data, pos)
        htok, pos = next_token(data, pos)
        stok, pos = next_token(data, pos)
        w, h, scale = int(wtok), int(htok), float(stok)
    except (ValueError, CorruptHeader) as e:
        raise CorruptHeader(f"{path}: unparseable header") from e
    if w <= 0 or h <= 0 or scale == 0:
        raise CorruptHeader(f"{path}: bad dimensions or scale")
    n_bytes = w * h * 3 * 4
    payload = data[pos : pos + n_bytes]
    if len(payload) != n_bytes:
        raise CorruptHeader(f"{path}: truncated payload ({len(payload)}/{n_bytes} bytes)")
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(payload, dtype=dtype).reshape(h, w, 3)[::-1]
    return RadianceImage(values.astype(np.float32))


# ---------------------------------------------------------------------------
# PNG


def save_ldr(image: np.ndarray, path) -> None:
    """Write an HxWx3 float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(arr, cv2.COLOR_RGB2BGR)):
        raise IOFailure(f"cannot write PNG {path}")


def load_ldr(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG into HxWx3 float32 in [0,1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        if not Path(path).exists():
            raise MissingFile(str(path))
        raise CorruptHeader(f"{path}: not decodable as an image")
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise WrongChannelCount(f"{path}: expected RGB, got shape {raw.shape}")
    raw = cv2.cvtColor(raw[:, :, :3], cv2.COLOR_BGR2RGB)
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    raise CorruptHeader(f"{path}: unsupported dtype {raw.dtype}")


def save_mask(mask: MotionMask, path) -> None:
    """Write a mask as single-channel 8-bit PNG (0 -> 0, 1 -> 255)."""
    arr = np.clip(np.rint(mask.values * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), arr):
        raise IOFailure(f"cannot write PNG {path}")


def load_mask(path, source_index: int = -1) -> MotionMask:
    """Read a single-channel 8-bit PNG as a mask, mapping 0..255 -> 0..1."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        if not Path(path).exists():
            raise MissingFile(str(path))
        raise CorruptHeader(f"{path}: not decodable as an image")
    if raw.ndim != 2:
        raise WrongChannelCount(f"{path}: mask must be single-channel, got {raw.shape}")
    if raw.dtype != np.uint8:
        raise CorruptHeader(f"{path}: mask must be 8-bit, got {raw.dtype}")
    return MotionMask(raw.astype(np.float32) / 255.0, source_index=source_index)


# ---------------------------------------------------------------------------
# Manifests


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "split": manifest.split,
        "entries": [
            {
                "stack_dir": e.stack_dir,
                "ev_bias": list(e.ev_bias),
                "reference_index": e.reference_index,
                "gt_hdr": e.gt_hdr,
                "gt_masks": e.gt_masks,
            }
            for e in manifest.entries
        ],
    }
    try:
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise IOFailure(f"cannot write manifest {path}: {e}") from e


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest; all referenced paths must exist.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    except (OSError, json.JSONDecodeError) as e:
        raise IOFailure(f"cannot parse manifest {path}: {e}") from e
    root = path.parent
    entries = []
    for rec in doc.get("entries", []):
        entry = ManifestEntry(
            stack_dir=rec["stack_dir"],
            ev_bias=[float(v) for v in rec["ev_bias"]],
            reference_index=int(rec["reference_index"]),
            gt_hdr=rec.get("gt_hdr"),
            gt_masks=rec.get("gt_masks"),
        )
        stack_dir = root / entry.stack_dir
        if not stack_dir.is_dir():
            raise MissingFile(f"stack dir {stack_dir}")
        ldr_paths = sorted(stack_dir.glob("ldr_*.png"))
        if len(ldr_paths) != len(entry.ev_bias):
            raise BadEV(
                f"{stack_dir}: {len(ldr_paths)} LDR frames vs {len(entry.ev_bias)} EV values"
            )
        for p in [entry.gt_hdr] + list(entry.gt_masks or []):
            if p is not None and not (root / p).exists():
                raise MissingFile(str(root / p))
        entries.append(entry)
    return DatasetManifest(entries=entries, split=doc.get("split", "train"))


def load_stack(entry: ManifestEntry, root=".") -> ExposureStack:
    """Load one manifest entry's LDR frames into an ExposureStack."""
    stack_dir = Path(root) / entry.stack_dir
    ldr_paths = sorted(stack_dir.glob("ldr_*.png"))
    if not ldr_paths:
        raise MissingFile(f"no ldr_*.png under {stack_dir}")
    images = [load_ldr(p) for p in ldr_paths]
    return ExposureStack(
        images=images,
        ev_bias=list(entry.ev_bias),
        reference_index=entry.reference_index,
    )


def load_scene(entry: ManifestEntry, root=".") -> SceneRecord:
    """Load a manifest entry with its ground truth, if present."""
    root = Path(root)
    stack = load_stack(entry, root)
    gt_hdr = load_hdr(root / entry.gt_hdr) if entry.gt_hdr else None
    gt_masks = None
    if entry.gt_masks:
        non_ref = stack.non_reference_indices()
        if len(entry.gt_masks) != len(non_ref):
            raise ShapeMismatch(
                f"{entry.stack_dir}: {len(entry.gt_masks)} masks for {len(non_ref)} non-reference frames"
            )
        gt_masks = [
            load_mask(root / p, source_index=i) for p, i in zip(entry.gt_masks, non_ref)
        ]
    return SceneRecord(stack=stack, gt_hdr=gt_hdr, gt_masks=gt_masks, scene_id=Path(entry.stack_dir).name)


# ---------------------------------------------------------------------------
# Synthetic scenes


def default_reference_index(k: int) -> int:
    """Middle frame, the usual bracketing reference."""
    return k // 2


def _stamp(arr, y, x, h, w, value):
    arr[y : y + h, x : x + w] = value


def synth_scene(
    seed: int,
    H: int,
    W: int,
    K: int,
    ev_bias: list[float],
    *,
    reference_index: int | None = None,
    motion_offset: tuple[int, int] | None = None,
    rect_radiance: float | None = None,
    gamma: float = GAMMA_DEFAULT,
) -> tuple[ExposureStack, RadianceImage, list[MotionMask]]:
    """Generate a bracketed stack of a synthetic scene with one moving rectangle.

    The static background is a log-smooth luminance ramp with textured patches,
    a small saturating hot patch (radiance 1.0) and a near-black patch, giving
    a dynamic range above 2**6. Frame k shows the rectangle displaced by
    (k - reference) * motion_offset; LDR frames follow a gamma-2.2 response:
    clamp((radiance * t_k) ** (1/gamma), 0, 1). Ground-truth masks mark pixels
    whose radiance differs from the reference frame. Deterministic per seed.

    ``motion_offset=(0, 0)`` forces a static scene; ``rect_radiance`` overrides
    the moving rectangle's linear radiance (e.g. >1 to saturate the reference).
    """
    if K != len(ev_bias):
        raise BadConfig(f"K={K} but len(ev_bias)={len(ev_bias)}")
    if H < 16 or W < 16:
        raise BadConfig(f"scene must be at least 16x16, got {H}x{W}")
    if reference_index is None:
        reference_index = default_reference_index(K)

    rng = np.random.default_rng(seed)
    r_lo, r_hi = 2e-3, 0.25

    # log-smooth ramp, mostly horizontal with a seeded vertical tilt
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    tilt = rng.uniform(-0.15, 0.15)
    g = (xx / max(W - 1, 1)) * (1 - abs(tilt)) + (yy / max(H - 1, 1)) * tilt
    g = (g - g.min()) / max(g.max() - g.min(), 1e-12)
    background = r_lo * (r_hi / r_lo) ** g

    # static textured patches (multiplicative noise kept below saturation risk)
    for _ in range(2):
        ph = int(rng.integers(H // 6, H // 3 + 1))
        pw = int(rng.integers(W // 6, W // 3 + 1))
        py = int(rng.integers(0, H - ph + 1))
        px = int(rng.integers(0, W - pw + 1))
        background[py : py + ph, px : px + pw] *= rng.uniform(0.8, 1.25, size=(ph, pw))

    # hot patch saturates the reference and all longer exposures; dark patch
    # quantizes to 0 in the shortest exposure
    spot = max(3, min(H, W) // 12)
    hot_y = int(rng.integers(0, H - spot + 1))
    hot_x = int(rng.integers((2 * W) // 3, W - spot + 1))
    _stamp(background, hot_y, hot_x, spot, spot, 1.0)
    _stamp(background, 0, 0, spot, spot, 1e-7)  # top-left, clear of the motion band

    # moving rectangle over the dark half of the ramp
    rect_h, rect_w = max(4, H // 4), max(4, W // 4)
    if rect_radiance is None:
        rect_radiance = float(rng.uniform(0.12, 0.18))
    if motion_offset is None:
        dy = int(rng.integers(2, 5)) * (1 if rng.random() < 0.5 else -1)
        dx = int(rng.integers(0, 3))
        motion_offset = (dy, dx)
    dy, dx = motion_offset
    span_y = abs(dy) * max(reference_index, K - 1 - reference_index)
    span_x = abs(dx) * max(reference_index, K - 1 - reference_index)
    if 2 * span_y + rect_h >= H or 2 * span_x + rect_w + W // 2 >= W:
        raise BadConfig("motion sweep does not fit inside the scene")
    base_y = int(rng.integers(span_y, H - rect_h - span_y + 1))
    x_lo = span_x + max(spot, W // 20)  # stay clear of the dark corner patch
    x_hi = W // 2 - rect_w - span_x
    base_x = int(rng.integers(x_lo, max(x_lo + 1, x_hi + 1)))

    frames = []
    for k in range(K):
        radiance = background.copy()
        ry = base_y + (k - reference_index) * dy
        rx = base_x + (k - reference_index) * dx
        _stamp(radiance, ry, rx, rect_h, rect_w, rect_radiance)
        frames.append(radiance)

    gt = np.repeat(frames[reference_index][:, :, None], 3, axis=2)
    ev_ref = ev_bias[reference_index]
    times = [2.0 ** (ev - ev_ref) for ev in ev_bias]
    images = [
        np.repeat(
            np.clip((frames[k] * times[k]) ** (1.0 / gamma), 0.0, 1.0)[:, :, None],
            3,
            axis=2,
        )
        for k in range(K)
    ]
    masks = [
        MotionMask(
            (np.abs(frames[k] - frames[reference_index]) > 1e-12).astype(np.float64),
            source_index=k,
        )
        for k in range(K)
        if k != reference_index
    ]
    stack = ExposureStack(images=images, ev_bias=list(ev_bias), reference_index=reference_index)
    return stack, RadianceImage(gt), masks


def write_scene(record: SceneRecord, scene_dir) -> ManifestEntry:
    """Write a scene to disk (8-bit LDR PNGs, PFM ground truth, mask PNGs)."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    stack = record.stack
    for k, img in enumerate(stack.images):
        save_ldr(img, scene_dir / f"ldr_{k:02d}.png")
    gt_rel = None
    if record.gt_hdr is not None:
        save_hdr(record.gt_hdr, scene_dir / "gt.pfm")
        gt_rel = f"{scene_dir.name}/gt.pfm"
    mask_rels = None
    if record.gt_masks is not None:
        mask_rels = []
        for m in record.gt_masks:
            name = f"mask_{m.source_index:02d}.png"
            save_mask(m, scene_dir / name)
            mask_rels.append(f"{scene_dir.name}/{name}")
    return ManifestEntry(
        stack_dir=scene_dir.name,
        ev_bias=list(stack.ev_bias),
        reference_index=stack.reference_index,
        gt_hdr=gt_rel,
        gt_masks=mask_rels,
    )


def synth_dataset(
    seeds, H: int, W: int, K: int, ev_bias: list[float], **kwargs
) -> list[SceneRecord]:
    """In-memory synthetic dataset, one scene per seed."""
    records = []
    for s in seeds:
        stack, gt, masks = synth_scene(int(s), H, W, K, ev_bias, **kwargs)
        records.append(SceneRecord(stack=stack, gt_hdr=gt, gt_masks=masks, scene_id=f"scene_{int(s):04d}"))
    return records
