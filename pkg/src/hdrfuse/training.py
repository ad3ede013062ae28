"""Losses on tonemapped radiance, a functional Adam optimizer, patch sampling,
and the segmentation/fusion training loops with their schedule and reports."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import save_checkpoint
from .errors import (
    BadConfig,
    EmptyDataset,
    ModeDataMismatch,
    PatchTooLarge,
    ShapeMismatch,
)
from .fusion import FusionModel
from .metrics import compare_hdr
from .nets import glorot_init as _glorot_fill
from .radiometry import MU_DEFAULT
from .segmentation import SegNet, pair_tensor
from .stack_io import ExposureStack, MotionMask, RadianceImage, SceneRecord

LOSS_TERMS = ("l1", "l2", "msssim")
LOSS_KINDS = ("l2", "l1", "l2+l1", "l1+msssim", "l2+msssim", "l1+l2+msssim")
TRAIN_MODES = ("two_stage", "end_to_end", "end_to_end_with_seg_loss")

WORKERS_ENV = "HDRFUSE_NUM_WORKERS"

MSSSIM_SCALES = 3
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    lr_decay: float = 0.96
    patch: int = 128
    loss: str = "l2"
    mode: str = "two_stage"
    seed: int = 0
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise BadConfig(f"lr must be positive, got {self.lr}")
        if not (0.0 < self.lr_decay <= 1.0):
            raise BadConfig(f"lr_decay must lie in (0,1], got {self.lr_decay}")
        if self.patch % 4:
            raise BadConfig(f"patch must be divisible by 4, got {self.patch}")
        if self.batch_size < 1:
            raise BadConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise BadConfig(f"epochs must be >= 1, got {self.epochs}")
        if parse_loss_kind(self.loss) is None:
            raise BadConfig(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.mode not in TRAIN_MODES:
            raise BadConfig(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise BadConfig(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay**epoch


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    wall_time: float = 0.0

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")
            f.write(json.dumps({"wall_time": self.wall_time}) + "\n")


def parse_loss_kind(kind: str):
    """Canonical tuple of loss terms, or None when the spelling is invalid."""
    parts = tuple(p.strip() for p in kind.split("+"))
    if not parts or any(p not in LOSS_TERMS for p in parts):
        return None
    if len(set(parts)) != len(parts):
        return None
    if parts == ("msssim",):
        return None
    return tuple(t for t in LOSS_TERMS if t in parts)


def glorot_init(shape, seed: int) -> torch.Tensor:
    """Glorot-uniform tensor for a given shape, deterministic per seed."""
    g = torch.Generator().manual_seed(int(seed))
    t = torch.empty(*shape, dtype=torch.float32)
    return _glorot_fill(t, g)


def mu_law_torch(x: torch.Tensor, mu: float = MU_DEFAULT, peak: float = 1.0) -> torch.Tensor:
    return torch.log1p(mu * x.clamp(min=0.0) / peak) / math.log1p(mu)


def _gaussian_kernel(channels: int, dtype, device) -> torch.Tensor:
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    k = torch.outer(g, g)
    k = k / k.sum()
    return k.expand(channels, 1, _SSIM_WINDOW, _SSIM_WINDOW).contiguous()


def _ssim_cs(x: torch.Tensor, y: torch.Tensor, peak: float = 1.0):
    c = x.shape[1]
    w = _gaussian_kernel(c, x.dtype, x.device)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    mx = F.conv2d(x, w, groups=c)
    my = F.conv2d(y, w, groups=c)
    vx = F.conv2d(x * x, w, groups=c) - mx * mx
    vy = F.conv2d(y * y, w, groups=c) - my * my
    cov = F.conv2d(x * y, w, groups=c) - mx * my
    cs = (2 * cov + c2) / (vx + vy + c2)
    ssim_map = ((2 * mx * my + c1) / (mx * mx + my * my + c1)) * cs
    return ssim_map.mean(), cs.mean()


def ms_ssim_torch(x: torch.Tensor, y: torch.Tensor, scales: int = MSSSIM_SCALES) -> torch.Tensor:
    """Multi-scale SSIM, 2x downsampling between scales, uniform exponents."""
    side = min(x.shape[2], x.shape[3])
    if side < _SSIM_WINDOW * 2 ** (scales - 1):
        raise ShapeMismatch(
            f"need >= {_SSIM_WINDOW * 2 ** (scales - 1)}px per side for {scales} scales, got {side}"
        )
    weight = 1.0 / scales
    out = None
    for s in range(scales):
        ssim_val, cs_val = _ssim_cs(x, y)
        term = ssim_val if s == scales - 1 else cs_val
        term = term.clamp(min=1e-6) ** weight
        out = term if out is None else out * term
        if s != scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return out


def loss_tonemapped(
    pred: torch.Tensor,
    gt: torch.Tensor,
    kind: str,
    mu: float = MU_DEFAULT,
    peak: float | None = None,
) -> torch.Tensor:
    """Reconstruction loss on mu-law tonemapped radiance: unweighted sum of the
    chosen terms (l1, l2, 1 - MS-SSIM)."""
    terms = parse_loss_kind(kind)
    if terms is None:
        raise BadConfig(f"unknown loss kind {kind!r}")
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred.shape)} vs {tuple(gt.shape)}")
    if peak is None:
        peak = float(gt.detach().max().clamp(min=1e-6))
    tp, tg = mu_law_torch(pred, mu, peak), mu_law_torch(gt, mu, peak)
    total = pred.new_zeros(())
    for t in terms:
        if t == "l2":
            total = total + torch.mean((tp - tg) ** 2)
        elif t == "l1":
            total = total + torch.mean(torch.abs(tp - tg))
        else:
            total = total + (1.0 - ms_ssim_torch(tp, tg))
    return total


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place over the parameter tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return state


def _draw_window(rng: np.random.Generator, h: int, w: int, size: int) -> tuple[int, int]:
    if size > min(h, w):
        raise PatchTooLarge(f"patch {size} exceeds image {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def sample_patch(
    stack: ExposureStack,
    gt_hdr: RadianceImage | None,
    masks: list[MotionMask] | None,
    size: int,
    rng: np.random.Generator,
):
    """One training crop: the same window, uniform over valid positions,
    applied to every frame, the ground truth, and every mask."""
    h, w = stack.images[0].shape[:2]
    y, x = _draw_window(rng, h, w, size)
    sl = np.s_[y : y + size, x : x + size]
    cropped = ExposureStack(
        images=[img[sl].copy() for img in stack.images],
        ev_bias=list(stack.ev_bias),
        reference_index=stack.reference_index,
    )
    gt_c = RadianceImage(values=gt_hdr.values[sl].copy()) if gt_hdr is not None else None
    masks_c = (
        [MotionMask(values=m.values[sl].copy(), source_index=m.source_index) for m in masks]
        if masks is not None
        else None
    )
    return cropped, gt_c, masks_c


def _num_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise BadConfig(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, min(16, n))


def _map_ordered(fn, items):
    # windows are drawn up front on the main thread, so worker count never
    # changes what gets computed, only how it is scheduled
    n = _num_workers()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _check_homogeneous(dataset: list[SceneRecord]):
    if not dataset:
        raise EmptyDataset("no training scenes")
    k0 = len(dataset[0].stack.images)
    r0 = dataset[0].stack.reference_index
    for rec in dataset[1:]:
        if len(rec.stack.images) != k0 or rec.stack.reference_index != r0:
            raise ModeDataMismatch("all scenes must share frame count and reference index")
    return k0, r0


def _seg_pairs(dataset: list[SceneRecord]):
    pairs = []
    for rec in dataset:
        if not rec.gt_masks:
            continue
        by_source = {m.source_index: m for m in rec.gt_masks}
        ref = rec.stack.images[rec.stack.reference_index]
        for k in rec.stack.non_reference_indices():
            if k in by_source:
                pairs.append((rec.stack.images[k], ref, by_source[k].values))
    if not pairs:
        raise EmptyDataset("no (source, reference, mask) training pairs")
    return pairs


def train_segmentation(
    dataset: list[SceneRecord],
    model: SegNet,
    config: TrainConfig,
    checkpoint_dir=None,
) -> tuple[SegNet, TrainReport]:
    """Minimize per-pixel binary cross-entropy on (source, reference) pairs."""
    t0 = time.time()
    pairs = _seg_pairs(dataset)
    rng = np.random.default_rng(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamState.for_params(params)
    steps = config.steps_per_epoch or max(1, math.ceil(len(pairs) / config.batch_size))
    report = TrainReport()
    step_mult = 2 ** model.config.depth
    if config.patch % step_mult:
        raise BadConfig(f"patch {config.patch} not divisible by segmenter stride {step_mult}")

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        for _ in range(steps):
            idx = rng.integers(0, len(pairs), size=config.batch_size)
            windows = []
            for i in idx:
                src, ref, mv = pairs[int(i)]
                y, x = _draw_window(rng, src.shape[0], src.shape[1], min(config.patch, src.shape[0], src.shape[1]) // step_mult * step_mult)
                windows.append((int(i), y, x))

            def crop(args):
                i, y, x = args
                src, ref, mv = pairs[i]
                size = min(config.patch, src.shape[0], src.shape[1]) // step_mult * step_mult
                sl = np.s_[y : y + size, x : x + size]
                return src[sl], ref[sl], mv[sl]

            batch = _map_ordered(crop, windows)
            x_in = torch.cat([pair_tensor(s, r) for s, r, _ in batch], dim=0)
            target = torch.as_tensor(
                np.stack([m for _, _, m in batch])[:, None], dtype=torch.float32
            )
            logits = model.forward_logits(x_in)
            loss = F.binary_cross_entropy_with_logits(logits, target)
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append(float(loss.detach()))
        val_iou = _seg_val_iou(model, pairs)
        report.records.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "lr": lr,
                "val_psnr_l": None,
                "val_psnr_t": None,
                "val_iou": val_iou,
            }
        )
        if checkpoint_dir is not None:
            save_checkpoint(model, os.path.join(checkpoint_dir, f"seg_epoch_{epoch:03d}.ckpt"))
            save_checkpoint(model, os.path.join(checkpoint_dir, "seg_latest.ckpt"))
    report.wall_time = time.time() - t0
    return model, report


def _seg_val_iou(model: SegNet, pairs) -> float:
    from .metrics import iou
    from .segmentation import seg_forward, hard_mask

    scores = []
    with torch.no_grad():
        for src, ref, mv in pairs:
            pred = hard_mask(seg_forward(model, src, ref), 0.5)
            scores.append(iou(pred.values, mv))
    return float(np.mean(scores))


def _predict_masks_tensor(seg_model: SegNet, ldrs, reference_index, in_graph: bool):
    """Soft masks for every non-reference slot, from batched LDR tensors."""
    masks = []
    ref = ldrs[reference_index]
    for k, src in enumerate(ldrs):
        if k == reference_index:
            masks.append(None)
            continue
        x = torch.cat([src, ref], dim=1)
        if in_graph:
            masks.append(seg_model(x))
        else:
            with torch.no_grad():
                masks.append(seg_model(x))
    return masks


def train_fusion(
    dataset: list[SceneRecord],
    model: FusionModel,
    seg_model: SegNet | None,
    config: TrainConfig,
    val_dataset: list[SceneRecord] | None = None,
    checkpoint_dir=None,
) -> tuple[FusionModel, TrainReport]:
    """Train the fusion model under one of three modes.

    two_stage: masks come from the frozen segmenter (or from ground truth when
    no segmenter is given); only fusion parameters update. end_to_end: the HDR
    loss backpropagates into the segmenter too. end_to_end_with_seg_loss: adds
    binary cross-entropy against ground-truth masks.
    """
    t0 = time.time()
    _check_homogeneous(dataset)
    mode = config.mode
    if mode in ("end_to_end", "end_to_end_with_seg_loss") and seg_model is None:
        raise ModeDataMismatch(f"{mode} requires a segmentation model")
    needs_gt_masks = mode == "end_to_end_with_seg_loss" or (mode == "two_stage" and seg_model is None)
    if needs_gt_masks and any(not rec.gt_masks for rec in dataset):
        raise ModeDataMismatch(f"{mode} without a segmenter requires ground-truth masks on every scene")
    if any(rec.gt_hdr is None for rec in dataset):
        raise ModeDataMismatch("fusion training requires ground-truth HDR on every scene")

    params = [p for p in model.parameters() if p.requires_grad]
    if mode != "two_stage":
        params = params + [p for p in seg_model.parameters() if p.requires_grad]
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    steps = config.steps_per_epoch or max(1, math.ceil(len(dataset) / config.batch_size))
    # tonemap ceiling = the dataset's ground-truth radiance ceiling, so the
    # training domain matches the evaluation tonemap
    peak = float(max(rec.gt_hdr.values.max() for rec in dataset))
    peak = max(peak, 1e-6)
    report = TrainReport()

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        losses = []
        for _ in range(steps):
            idx = rng.integers(0, len(dataset), size=config.batch_size)
            jobs = []
            for i in idx:
                rec = dataset[int(i)]
                h, w = rec.stack.images[0].shape[:2]
                size = min(config.patch, h, w) // 4 * 4
                y, x = _draw_window(rng, h, w, size)
                jobs.append((int(i), y, x, size))

            def crop(args):
                i, y, x, size = args
                rec = dataset[i]
                sl = np.s_[y : y + size, x : x + size]
                imgs = [img[sl] for img in rec.stack.images]
                gt = rec.gt_hdr.values[sl]
                mvs = {m.source_index: m.values[sl] for m in (rec.gt_masks or [])}
                return imgs, gt, mvs

            batch = _map_ordered(crop, jobs)
            stack0 = dataset[0].stack
            k_total = len(stack0.images)
            ref_idx = stack0.reference_index
            ldrs, linears = [], []
            for k in range(k_total):
                arr = np.stack([b[0][k] for b in batch]).transpose(0, 3, 1, 2)
                ldrs.append(torch.as_tensor(arr, dtype=torch.float32))
                lin = arr.astype(np.float64) ** 2.2 / stack0.exposure_times[k]
                linears.append(torch.as_tensor(lin, dtype=torch.float32))
            gt_t = torch.as_tensor(
                np.stack([b[1] for b in batch]).transpose(0, 3, 1, 2), dtype=torch.float32
            )

            gt_mask_ts = None
            if needs_gt_masks or mode == "end_to_end_with_seg_loss":
                gt_mask_ts = [
                    None
                    if k == ref_idx
                    else torch.as_tensor(
                        np.stack([b[2][k] for b in batch])[:, None], dtype=torch.float32
                    )
                    for k in range(k_total)
                ]

            if seg_model is None:
                mask_ts = gt_mask_ts
            else:
                mask_ts = _predict_masks_tensor(
                    seg_model, ldrs, ref_idx, in_graph=(mode != "two_stage")
                )

            pred = model.forward_tensors(ldrs, linears, mask_ts, ref_idx)
            loss = loss_tonemapped(pred, gt_t, config.loss, peak=peak)
            if mode == "end_to_end_with_seg_loss":
                seg_bce = pred.new_zeros(())
                n_terms = 0
                for k in range(k_total):
                    if k == ref_idx or gt_mask_ts[k] is None:
                        continue
                    seg_bce = seg_bce + F.binary_cross_entropy(
                        mask_ts[k].clamp(1e-6, 1 - 1e-6), gt_mask_ts[k]
                    )
                    n_terms += 1
                if n_terms:
                    loss = loss + seg_bce / n_terms

            model.zero_grad(set_to_none=True)
            if seg_model is not None:
                seg_model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            losses.append(float(loss.detach()))

        val = _fusion_val(model, seg_model, val_dataset or dataset)
        report.records.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "lr": lr,
                "val_psnr_l": val[0],
                "val_psnr_t": val[1],
            }
        )
        if checkpoint_dir is not None:
            save_checkpoint(model, os.path.join(checkpoint_dir, f"fusion_epoch_{epoch:03d}.ckpt"))
            save_checkpoint(model, os.path.join(checkpoint_dir, "fusion_latest.ckpt"))
    report.wall_time = time.time() - t0
    return model, report


def _fusion_val(model: FusionModel, seg_model, dataset: list[SceneRecord]):
    from .fusion import forward
    from .segmentation import seg_forward_stack

    psnr_l, psnr_t = [], []
    for rec in dataset:
        if rec.gt_hdr is None:
            continue
        if seg_model is not None:
            masks = seg_forward_stack(seg_model, rec.stack)
        else:
            masks = rec.gt_masks or []
        out = forward(model, rec.stack, masks)
        scores = compare_hdr(out.values, rec.gt_hdr.values)
        psnr_l.append(scores["psnr_l"])
        psnr_t.append(scores["psnr_t_mu"])
    if not psnr_l:
        return None, None
    cap = lambda v: min(v, 99.99)
    return float(np.mean([cap(v) for v in psnr_l])), float(np.mean([cap(v) for v in psnr_t]))
