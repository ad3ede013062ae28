"""Run configuration document and the frozen ablation presets A1..A12."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import BadConfig
from .fusion import ModelConfig
from .segmentation import SegmenterConfig
from .training import TrainConfig

MASK_SOURCES = ("cnn", "diff", "zero", "gt")
METHODS = ("neural", "classical")


@dataclass
class RunConfig:
    """One self-contained run: model, segmenter, training, data, output.

    ``mask_source`` picks where motion masks come from (trained CNN, the
    thresholded-difference baseline, all-zero maps, or dataset ground truth);
    ``method`` selects the neural pipeline or classical replace-and-merge.
    """

    seed: int = 0
    out_dir: str | None = None
    data_manifest: str | None = None
    mask_source: str = "cnn"
    method: str = "neural"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)

    def __post_init__(self):
        if self.mask_source not in MASK_SOURCES:
            raise BadConfig(f"mask_source must be one of {MASK_SOURCES}, got {self.mask_source!r}")
        if self.method not in METHODS:
            raise BadConfig(f"method must be one of {METHODS}, got {self.method!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise BadConfig(f"run config must be a mapping, got {type(doc).__name__}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise BadConfig(f"unknown run config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        for key, sub_cls in (("train", TrainConfig), ("model", ModelConfig), ("segmenter", SegmenterConfig)):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = _sub_config(sub_cls, kwargs[key], key)
        return cls(**kwargs)


def _sub_config(sub_cls, doc, where: str):
    if isinstance(doc, sub_cls):
        return doc
    if not isinstance(doc, dict):
        raise BadConfig(f"{where} must be a mapping, got {type(doc).__name__}")
    known = {f.name for f in dataclasses.fields(sub_cls)}
    unknown = set(doc) - known
    if unknown:
        raise BadConfig(f"unknown {where} keys: {sorted(unknown)}")
    return sub_cls(**doc)


# Desk-scale training knobs shared by every preset run: small model, short
# schedule. Paper-scale defaults stay on TrainConfig itself.
_DESK_TRAIN = dict(lr=1e-3, batch_size=2, epochs=2, lr_decay=0.96, patch=32, loss="l2", steps_per_epoch=8)
_DESK_MODEL = dict(enc_channels=8, memory_slots=4)
_DESK_SEG = dict(base_channels=8, depth=2)

# name -> (description, overrides). Overrides are relative to the proposed
# configuration: two-stage training, CNN masks, memory, sdc_dense decoder.
PRESETS: dict[str, tuple[str, dict]] = {
    "A1": ("end-to-end training, reconstruction loss only", {"train": {"mode": "end_to_end"}}),
    "A2": ("end-to-end training with segmentation loss", {"train": {"mode": "end_to_end_with_seg_loss"}}),
    "A3": ("no segmentation map, single fusion network", {"mask_source": "zero", "model": {"share_fusion": True}}),
    "A4": ("thresholded-difference masks into the neural pipeline", {"mask_source": "diff"}),
    "A5": ("thresholded-difference masks, classical replace and merge", {"mask_source": "diff", "method": "classical"}),
    "A6": ("CNN masks, classical replace and merge", {"mask_source": "cnn", "method": "classical"}),
    "A7": ("arbitrary input count via mean+max aggregation", {"model": {"aggregator": "mean_max"}}),
    "A8": ("single shared read/write submodule", {"model": {"share_rw": True}}),
    "A9": ("vanilla convolution decoder", {"model": {"decoder": "vanilla"}}),
    "A10": ("residual block decoder", {"model": {"decoder": "resnet"}}),
    "A11": ("parallel dilated conv decoder, no dense links", {"model": {"decoder": "sdc"}}),
    "A12": ("parallel dilated conv decoder with dense links", {"model": {"decoder": "sdc_dense"}}),
}


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_config(
    name: str,
    k: int,
    data_manifest: str | None = None,
    out_dir: str | None = None,
    seed: int = 0,
) -> RunConfig:
    """Frozen desk-scale RunConfig for one ablation preset.

    ``k`` is the stack frame count from the dataset; presets other than A7 pin
    the aggregator to it.
    """
    if name not in PRESETS:
        raise BadConfig(f"unknown preset {name!r}; choose from {preset_names()}")
    _, overrides = PRESETS[name]
    train_kw = dict(_DESK_TRAIN)
    train_kw.update(overrides.get("train", {}))
    train_kw.setdefault("mode", "two_stage")
    train_kw["seed"] = seed
    model_kw = dict(_DESK_MODEL)
    model_kw.update(overrides.get("model", {}))
    if model_kw.get("aggregator", "concat_fixed_k") == "concat_fixed_k":
        model_kw.setdefault("aggregator", "concat_fixed_k")
        model_kw["K"] = k
    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        data_manifest=data_manifest,
        mask_source=overrides.get("mask_source", "cnn"),
        method=overrides.get("method", "neural"),
        train=TrainConfig(**train_kw),
        model=ModelConfig(**model_kw),
        segmenter=SegmenterConfig(**_DESK_SEG),
    )


def preset_description(name: str) -> str:
    if name not in PRESETS:
        raise BadConfig(f"unknown preset {name!r}")
    return PRESETS[name][0]
