"""Command-line entry point: synth, segment, fuse, train-seg, train-fusion,
eval, and ablate subcommands with reproducible resolved configs.

Exit codes: 0 ok, 2 bad config, 3 IO failure, 4 model/data mismatch,
5 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_fusion_checkpoint, load_seg_checkpoint, save_checkpoint
from .errors import ConfigError, HdrfuseError, IOFailure, MissingFile
from .fusion import FusionModel, ModelConfig, forward as fusion_forward
from .metrics import evaluate
from .nets import install_nan_guard
from .presets import RunConfig, preset_config, preset_description, preset_names
from .radiometry import deghost_classical, mu_law_tonemap
from .segmentation import (
    SegNet,
    SegmenterConfig,
    diff_segment_stack,
    seg_forward_stack,
)
from .stack_io import (
    DatasetManifest,
    ExposureStack,
    ManifestEntry,
    MotionMask,
    RadianceImage,
    SceneRecord,
    load_ldr,
    load_manifest,
    load_scene,
    load_stack,
    save_hdr,
    save_ldr,
    save_manifest,
    save_mask,
    synth_scene,
    write_scene,
)
from .training import TrainConfig, train_fusion, train_segmentation


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--seed", type=int, default=0, help="RNG seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")


def _resolve_device(name: str) -> torch.device:
    if name == "cpu":
        return torch.device("cpu")
    if not torch.cuda.is_available():
        raise ConfigError("no accelerator available on this machine")
    return torch.device("cuda")


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                doc = json.load(f)
        except FileNotFoundError as e:
            raise MissingFile(str(args.config)) from e
        except (OSError, json.JSONDecodeError) as e:
            raise IOFailure(f"cannot parse config {args.config}: {e}") from e
        cfg = RunConfig.from_dict(doc)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, train=dataclasses.replace(cfg.train, seed=args.seed))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    return cfg


def _write_resolved(out_dir, command: str, doc: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as f:
        json.dump({"command": command, **doc}, f, indent=2, default=str)
        f.write("\n")


def _parse_ev(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as e:
        raise ConfigError(f"cannot parse EV list {text!r}") from e


def _load_records(manifest_path) -> tuple[DatasetManifest, list[SceneRecord], str]:
    manifest = load_manifest(manifest_path)
    root = str(Path(manifest_path).parent)
    return manifest, [load_scene(e, root) for e in manifest.entries], root


def _stack_from_args(args) -> ExposureStack:
    if args.data:
        manifest = load_manifest(args.data)
        root = Path(args.data).parent
        wanted = args.scene
        for e in manifest.entries:
            if wanted in (None, Path(e.stack_dir).name):
                return load_stack(e, root)
        raise MissingFile(f"scene {wanted!r} not in {args.data}")
    if not args.stack or args.ev is None:
        raise ConfigError("need either --data [--scene] or --stack with --ev")
    ev = _parse_ev(args.ev)
    ref = args.ref if args.ref is not None else len(ev) // 2
    entry = ManifestEntry(stack_dir=".", ev_bias=ev, reference_index=ref)
    return load_stack(entry, args.stack)


def _masks_for(stack: ExposureStack, source: str, seg_model: SegNet | None, tau: float) -> list[MotionMask]:
    if source == "diff":
        return diff_segment_stack(stack, tau)
    if source == "zero":
        h, w = stack.images[0].shape[:2]
        return [MotionMask(values=np.zeros((h, w)), source_index=k) for k in stack.non_reference_indices()]
    if source == "cnn":
        if seg_model is None:
            raise ConfigError("mask_source=cnn requires a segmentation checkpoint")
        return seg_forward_stack(seg_model, stack)
    raise ConfigError(f"unsupported mask source {source!r}")


def _records_with_masks(records: list[SceneRecord], source: str, tau: float) -> list[SceneRecord]:
    """Replace each record's masks per the requested source (diff or zero);
    gt keeps the dataset annotations."""
    if source == "gt":
        missing = [r.scene_id for r in records if not r.gt_masks]
        if missing:
            raise ConfigError(f"mask_source=gt but scenes lack masks: {missing}")
        return records
    out = []
    for r in records:
        masks = _masks_for(r.stack, source, None, tau)
        out.append(SceneRecord(stack=r.stack, gt_hdr=r.gt_hdr, gt_masks=masks, scene_id=r.scene_id))
    return out


def cmd_synth(args) -> int:
    ev = _parse_ev(args.ev)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = args.seed + i
        stack, gt, masks = synth_scene(seed, args.size, args.size, len(ev), ev)
        rec = SceneRecord(stack=stack, gt_hdr=gt, gt_masks=masks, scene_id=f"scene_{seed:04d}")
        entries.append(write_scene(rec, out / rec.scene_id))
    save_manifest(DatasetManifest(entries=entries), out / "manifest.json")
    _write_resolved(out, "synth", {"seed": args.seed, "count": args.count, "size": args.size, "ev": ev})
    print(f"wrote {len(entries)} scenes to {out}")
    return 0


def cmd_segment(args) -> int:
    stack = _stack_from_args(args)
    seg_model = load_seg_checkpoint(args.checkpoint) if args.checkpoint else None
    if seg_model is not None:
        install_nan_guard(seg_model)
    masks = _masks_for(stack, args.method, seg_model, args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in masks:
        save_mask(m, out / f"mask_{m.source_index:02d}.png")
    _write_resolved(out, "segment", {"method": args.method, "tau": args.tau, "seed": args.seed})
    print(f"wrote {len(masks)} masks to {out}")
    return 0


def cmd_fuse(args) -> int:
    stack = _stack_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "classical":
        seg_model = load_seg_checkpoint(args.seg_checkpoint) if args.seg_checkpoint else None
        source = args.mask_source or ("cnn" if seg_model else "diff")
        masks = _masks_for(stack, source, seg_model, args.tau)
        result = deghost_classical(stack, masks)
    else:
        if not args.checkpoint:
            raise ConfigError("neural fusion requires --checkpoint")
        model = load_fusion_checkpoint(args.checkpoint)
        install_nan_guard(model)
        seg_model = load_seg_checkpoint(args.seg_checkpoint) if args.seg_checkpoint else None
        source = args.mask_source or ("cnn" if seg_model else "diff")
        masks = _masks_for(stack, source, seg_model, args.tau)
        result = fusion_forward(model, stack, masks)
    save_hdr(result, out / "fused.pfm")
    preview = mu_law_tonemap(result.values)
    save_ldr(preview, out / "fused_preview.png")
    _write_resolved(out, "fuse", {"method": args.method, "seed": args.seed, "mask_source": args.mask_source})
    print(f"wrote {out / 'fused.pfm'} and preview")
    return 0


def cmd_train_seg(args) -> int:
    cfg = _load_run_config(args)
    _, records, _ = _load_records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    device = _resolve_device(args.device)
    g = torch.Generator().manual_seed(cfg.seed)
    model = SegNet(cfg.segmenter, g).to(device)
    install_nan_guard(model)
    model, report = train_segmentation(records, model, cfg.train, checkpoint_dir=str(out))
    report.save_jsonl(out / "train_report.jsonl")
    save_checkpoint(model, out / "seg.ckpt")
    _write_resolved(out, "train-seg", cfg.to_dict())
    print(f"final loss {report.records[-1]['mean_loss']:.4f}, checkpoint {out / 'seg.ckpt'}")
    return 0


def cmd_train_fusion(args) -> int:
    cfg = _load_run_config(args)
    _, records, _ = _load_records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    device = _resolve_device(args.device)

    g = torch.Generator().manual_seed(cfg.seed)
    model = FusionModel(cfg.model, g).to(device)
    install_nan_guard(model)

    seg_model = None
    if args.seg_checkpoint:
        seg_model = load_seg_checkpoint(args.seg_checkpoint).to(device)
    elif cfg.train.mode != "two_stage" or cfg.mask_source == "cnn":
        raise ConfigError(f"mode {cfg.train.mode!r} with mask_source {cfg.mask_source!r} requires --seg-checkpoint")

    train_records = records
    if seg_model is None and cfg.mask_source in ("diff", "zero"):
        train_records = _records_with_masks(records, cfg.mask_source, args.tau)

    model, report = train_fusion(
        train_records, model, seg_model, cfg.train, checkpoint_dir=str(out)
    )
    report.save_jsonl(out / "train_report.jsonl")
    save_checkpoint(model, out / "fusion.ckpt")
    _write_resolved(out, "train-fusion", cfg.to_dict())
    last = report.records[-1]
    print(
        f"final loss {last['mean_loss']:.4f}, "
        f"val PSNR-L {last['val_psnr_l']:.2f}, PSNR-T {last['val_psnr_t']:.2f}"
    )
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.data)
    root = str(Path(args.data).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(args.pred, manifest, manifest_root=root, hdr_vdp_file=args.hdr_vdp)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval.json")
    _write_resolved(out, "eval", {"pred": args.pred, "data": args.data, "seed": args.seed})
    agg = report.aggregate()
    print(
        f"{len(report.rows)} scenes: PSNR-L {agg['psnr_l']:.2f}, "
        f"PSNR-T(mu) {agg['psnr_t_mu']:.2f}, SSIM-L {agg['ssim_l']:.4f}"
    )
    return 0


def _run_preset(cfg: RunConfig, records: list[SceneRecord], out: Path, device) -> dict:
    """Train (as configured) and evaluate one ablation preset on the records."""
    tau = 0.1
    seg_model = None
    inference_source = cfg.mask_source

    if cfg.mask_source == "cnn":
        g = torch.Generator().manual_seed(cfg.seed)
        seg_model = SegNet(cfg.segmenter, g).to(device)
        if cfg.method == "classical" or cfg.train.mode == "two_stage":
            seg_cfg = dataclasses.replace(cfg.train, mode="two_stage")
            seg_model, _ = train_segmentation(records, seg_model, seg_cfg)

    if cfg.method == "neural":
        g = torch.Generator().manual_seed(cfg.seed + 1)
        model = FusionModel(cfg.model, g).to(device)
        install_nan_guard(model)
        train_records = records
        if seg_model is None:
            train_records = _records_with_masks(records, cfg.mask_source, tau)
        model, treport = train_fusion(train_records, model, seg_model, cfg.train)
        treport.save_jsonl(out / "train_report.jsonl")
        save_checkpoint(model, out / "fusion.ckpt")
    if seg_model is not None:
        save_checkpoint(seg_model, out / "seg.ckpt")

    pred_dir = out / "preds"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        masks = _masks_for(rec.stack, inference_source, seg_model, tau) if inference_source != "gt" else rec.gt_masks
        if cfg.method == "classical":
            result = deghost_classical(rec.stack, masks)
        else:
            result = fusion_forward(model, rec.stack, masks)
        save_hdr(result, pred_dir / f"{rec.scene_id}.pfm")
    return {"pred_dir": str(pred_dir)}


def cmd_ablate(args) -> int:
    manifest, records, root = _load_records(args.data)
    if not records:
        raise ConfigError("ablation needs at least one scene")
    k = len(records[0].stack.images)
    cfg = preset_config(args.preset, k, data_manifest=args.data, out_dir=args.out, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    device = _resolve_device(args.device)

    run = _run_preset(cfg, records, out, device)
    report = evaluate(run["pred_dir"], manifest, manifest_root=root)
    report.write_csv(out / "eval.csv")
    report.write_json(out / "eval.json")
    agg = report.aggregate()
    row = {
        "preset": args.preset,
        "description": preset_description(args.preset),
        "psnr_l": agg["psnr_l"],
        "psnr_t": agg["psnr_t_mu"],
    }
    with open(out / "ablation_row.json", "w") as f:
        json.dump(row, f, indent=2)
        f.write("\n")
    _write_resolved(out, "ablate", cfg.to_dict())
    print(f"{args.preset}: PSNR-L {row['psnr_l']:.2f}, PSNR-T {row['psnr_t']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hdrfuse",
        description="Ghost-free HDR fusion of bracketed exposure stacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--ev", default="-2,0,2", help="comma-separated EV offsets")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="emit motion masks for one stack")
    p.add_argument("--stack", help="directory of ldr_*.png frames")
    p.add_argument("--ev", help="EV offsets for --stack")
    p.add_argument("--ref", type=int, help="reference index for --stack")
    p.add_argument("--data", help="dataset manifest")
    p.add_argument("--scene", help="scene id within --data")
    p.add_argument("--method", choices=("cnn", "diff"), default="diff")
    p.add_argument("--checkpoint", help="segmentation checkpoint for --method cnn")
    p.add_argument("--tau", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("fuse", help="fuse one stack into an HDR image")
    p.add_argument("--stack")
    p.add_argument("--ev")
    p.add_argument("--ref", type=int)
    p.add_argument("--data")
    p.add_argument("--scene")
    p.add_argument("--method", choices=("classical", "neural"), default="classical")
    p.add_argument("--checkpoint", help="fusion checkpoint (neural)")
    p.add_argument("--seg-checkpoint", dest="seg_checkpoint")
    p.add_argument("--mask-source", dest="mask_source", choices=("cnn", "diff", "zero"))
    p.add_argument("--tau", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("train-seg", help="train the segmentation network")
    p.add_argument("--data", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_train_seg)

    p = sub.add_parser("train-fusion", help="train the fusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--seg-checkpoint", dest="seg_checkpoint")
    p.add_argument("--tau", type=float, default=0.1)
    _add_common(p)
    p.set_defaults(fn=cmd_train_fusion)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of <scene>.pfm predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--hdr-vdp", dest="hdr_vdp", help="external evaluator scores (JSON)")
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation preset end to end")
    p.add_argument("--preset", required=True, choices=preset_names())
    p.add_argument("--data", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except HdrfuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
