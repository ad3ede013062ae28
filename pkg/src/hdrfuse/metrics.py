"""Full-reference quality metrics (PSNR, SSIM, IoU) and the dataset-level
evaluation harness producing per-image and aggregate reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ImageTooSmall, MissingPrediction, ShapeMismatch
from .radiometry import MU_DEFAULT, mu_law_tonemap, reinhard_tonemap
from .stack_io import DatasetManifest, MotionMask, load_hdr

PSNR_CAP_DB = 99.99
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

REPORT_COLUMNS = ["id", "psnr_l", "psnr_t_mu", "psnr_t_reinhard", "ssim_l", "ssim_t_mu", "hdr_vdp"]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf when the images are identical."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_stats(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # gaussian-weighted local means over all valid window positions
    views = np.lib.stride_tricks.sliding_window_view(x, w.shape)
    return np.tensordot(views, w, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5),
    C1=(0.01*peak)^2, C2=(0.03*peak)^2, averaged over valid window positions
    and channels. Symmetric in its arguments."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ImageTooSmall(f"need at least {SSIM_WINDOW}px per side, got {a.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    w = _gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _window_stats(x, w), _window_stats(y, w)
        mxx, myy, mxy = _window_stats(x * x, w), _window_stats(y * y, w), _window_stats(x * y, w)
        vx, vy, cov = mxx - mx * mx, myy - my * my, mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def iou(a, b) -> float:
    """Intersection over union of two binary masks (values > 0.5 count as
    positive). Two empty masks score 1.0."""
    av = a.values if isinstance(a, MotionMask) else np.asarray(a)
    bv = b.values if isinstance(b, MotionMask) else np.asarray(b)
    if av.shape != bv.shape:
        raise ShapeMismatch(f"{av.shape} vs {bv.shape}")
    ah, bh = av > 0.5, bv > 0.5
    union = np.logical_or(ah, bh).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ah, bh).sum() / union)


@dataclass
class EvalRow:
    id: str
    psnr_l: float
    psnr_t_mu: float
    psnr_t_reinhard: float
    ssim_l: float
    ssim_t_mu: float
    hdr_vdp: float | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def aggregate(self) -> dict:
        """Arithmetic means over rows; PSNR capped at 99.99 dB for reporting."""
        agg = {}
        for col in REPORT_COLUMNS[1:]:
            vals = [getattr(r, col) for r in self.rows]
            if any(v is None for v in vals) or not vals:
                agg[col] = None
            else:
                agg[col] = float(np.mean([_cap(v) for v in vals]))
        return agg

    def write_json(self, path) -> None:
        doc = {
            "rows": [
                {col: _cap_opt(getattr(r, col)) if col != "id" else r.id for col in REPORT_COLUMNS}
                for r in self.rows
            ],
            "aggregate": self.aggregate(),
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_COLUMNS)
            for r in self.rows:
                writer.writerow(
                    [r.id] + ["" if _cap_opt(getattr(r, c)) is None else f"{_cap(getattr(r, c)):.4f}" for c in REPORT_COLUMNS[1:]]
                )


def _cap(v: float) -> float:
    return min(v, PSNR_CAP_DB) if math.isinf(v) else v


def _cap_opt(v):
    return None if v is None else _cap(v)


def compare_hdr(pred: np.ndarray, gt: np.ndarray, mu: float = MU_DEFAULT) -> dict:
    """Linear and tonemapped metrics for one prediction/ground-truth pair.

    Both images are normalized by the ground truth's peak before PSNR-L and
    before tonemapping, so scores are self-consistent across scenes.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    gt_peak = float(gt.max())
    if gt_peak <= 0:
        gt_peak = 1.0
    pred_n, gt_n = pred / gt_peak, gt / gt_peak
    pred_mu = mu_law_tonemap(pred_n, mu, peak=1.0)
    gt_mu = mu_law_tonemap(gt_n, mu, peak=1.0)
    return {
        "psnr_l": psnr(pred_n, gt_n, peak=1.0),
        "psnr_t_mu": psnr(pred_mu, gt_mu, peak=1.0),
        "psnr_t_reinhard": psnr(reinhard_tonemap(pred_n), reinhard_tonemap(gt_n), peak=1.0),
        "ssim_l": ssim(pred_n, gt_n, peak=1.0),
        "ssim_t_mu": ssim(pred_mu, gt_mu, peak=1.0),
    }


def evaluate(
    pred_dir,
    manifest: DatasetManifest,
    manifest_root=".",
    mu: float = MU_DEFAULT,
    hdr_vdp_file=None,
) -> EvalReport:
    """Score one prediction per manifest entry (``<pred_dir>/<scene>.pfm``).

    HDR-VDP scores are never computed here; they are filled in only when an
    external evaluator's JSON file ({scene_id: score}) is supplied.
    """
    pred_dir = Path(pred_dir)
    root = Path(manifest_root)
    vdp = {}
    if hdr_vdp_file is not None:
        with open(hdr_vdp_file) as f:
            vdp = json.load(f)
    report = EvalReport()
    for entry in manifest.entries:
        scene_id = Path(entry.stack_dir).name
        pred_path = pred_dir / f"{scene_id}.pfm"
        if not pred_path.exists():
            raise MissingPrediction(str(pred_path))
        if entry.gt_hdr is None:
            raise MissingPrediction(f"{entry.stack_dir} has no ground-truth HDR")
        pred = load_hdr(pred_path).values
        gt = load_hdr(root / entry.gt_hdr).values
        scores = compare_hdr(pred, gt, mu=mu)
        report.rows.append(EvalRow(id=scene_id, hdr_vdp=vdp.get(scene_id), **scores))
    return report
