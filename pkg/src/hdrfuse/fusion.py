"""The fusion model: per-image encoder, mask-guided static/dynamic feature
split, dual fusion stages, slot memory with content-based reads, and four
decoder variants emitting a linear radiance map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    ArityMismatch,
    BadConfig,
    BadSpatialDims,
    ShapeMismatch,
    SlotOutOfRange,
)
from .nets import act, count_params, make_conv, make_deconv
from .radiometry import ldr_to_hdr_domain
from .stack_io import GAMMA_DEFAULT, ExposureStack, MotionMask, RadianceImage

DECODER_VARIANTS = ("vanilla", "resnet", "sdc", "sdc_dense")
AGGREGATORS = ("concat_fixed_k", "mean_max")

ENCODER_FACTOR = 4  # two stride-2 stages
VANILLA_DEPTH = 9
SDC_BLOCKS = 3
SDC_DILATIONS = (1, 2, 4)


@dataclass
class ModelConfig:
    enc_channels: int = 16
    share_fusion: bool = False
    use_memory: bool = True
    memory_slots: int = 4
    share_rw: bool = False
    decoder: str = "sdc_dense"
    aggregator: str = "mean_max"
    K: int | None = None

    def __post_init__(self):
        if self.enc_channels < 8:
            raise BadConfig(f"enc_channels must be >= 8, got {self.enc_channels}")
        if self.decoder not in DECODER_VARIANTS:
            raise BadConfig(f"decoder must be one of {DECODER_VARIANTS}, got {self.decoder!r}")
        if self.aggregator not in AGGREGATORS:
            raise BadConfig(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.use_memory and self.memory_slots < 1:
            raise BadConfig(f"memory_slots must be >= 1, got {self.memory_slots}")
        if self.aggregator == "concat_fixed_k":
            if self.K is None:
                raise BadConfig("K is required with the concat_fixed_k aggregator")
            if self.K < 2:
                raise BadConfig(f"K must be >= 2 with concat_fixed_k, got {self.K}")

    @property
    def feat_channels(self) -> int:
        return ENCODER_FACTOR * self.enc_channels

    @property
    def agg_channels(self) -> int:
        c = self.feat_channels
        return self.K * c if self.aggregator == "concat_fixed_k" else 2 * c


class Encoder(nn.Module):
    """6-channel (LDR + linear) input, two stride-2 stages, C = 4*enc_channels."""

    def __init__(self, enc_channels: int, generator=None):
        super().__init__()
        c = enc_channels
        self.conv_in = make_conv(6, c, generator=generator)
        self.down1 = make_conv(c, 2 * c, stride=2, generator=generator)
        self.down2 = make_conv(2 * c, 4 * c, stride=2, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] % ENCODER_FACTOR or x.shape[3] % ENCODER_FACTOR:
            raise BadSpatialDims(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {ENCODER_FACTOR}"
            )
        y = act(self.conv_in(x))
        y = act(self.down1(y))
        return act(self.down2(y))


class FusionStage(nn.Module):
    """Two bias-free conv stages mapping an aggregate to C channels.

    Bias-free so an all-zero aggregate yields an all-zero output for any
    parameter values; this makes the dynamic branch structurally inert when
    every mask is zero.
    """

    def __init__(self, cin: int, cout: int, generator=None):
        super().__init__()
        self.conv1 = make_conv(cin, cout, bias=False, generator=generator)
        self.conv2 = make_conv(cout, cout, bias=False, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return act(self.conv2(act(self.conv1(x))))


@dataclass
class MemoryState:
    """Pass-local slot store; every forward owns a fresh zeroed state."""

    slots: list
    write_index: int = 0

    @classmethod
    def zeros(cls, num_slots: int, shape, dtype, device) -> "MemoryState":
        return cls(slots=[torch.zeros(shape, dtype=dtype, device=device) for _ in range(num_slots)])


class Memory(nn.Module):
    """M-slot memory with per-slot 1x1 read/write convs (bias-free).

    share_rw aliases every write conv to one tensor and every read conv to
    another, cutting read/write parameters by exactly a factor of M.
    """

    def __init__(self, channels: int, num_slots: int, share_rw: bool, generator=None):
        super().__init__()
        self.num_slots = num_slots
        self.share_rw = share_rw
        n = 1 if share_rw else num_slots
        self.writes = nn.ModuleList(
            [make_conv(channels, channels, kernel=1, bias=False, generator=generator) for _ in range(n)]
        )
        self.reads = nn.ModuleList(
            [make_conv(channels, channels, kernel=1, bias=False, generator=generator) for _ in range(n)]
        )

    def _write_conv(self, slot: int) -> nn.Conv2d:
        return self.writes[0 if self.share_rw else slot]

    def _read_conv(self, slot: int) -> nn.Conv2d:
        return self.reads[0 if self.share_rw else slot]

    def new_state(self, shape, dtype, device) -> MemoryState:
        return MemoryState.zeros(self.num_slots, shape, dtype, device)

    def write(self, state: MemoryState, feats: torch.Tensor, slot: int) -> MemoryState:
        if not (0 <= slot < self.num_slots):
            raise SlotOutOfRange(f"slot {slot} outside [0, {self.num_slots})")
        state.slots[slot] = state.slots[slot] + self._write_conv(slot)(feats)
        state.write_index += 1
        return state

    def read(self, state: MemoryState, query: torch.Tensor) -> torch.Tensor:
        # similarity_j = channel-mean(query * slot_j), softmaxed over j per pixel
        sims = [torch.mean(query * s, dim=1, keepdim=True) for s in state.slots]
        weights = torch.softmax(torch.cat(sims, dim=1), dim=1)
        out = torch.zeros_like(query)
        for j, s in enumerate(state.slots):
            out = out + weights[:, j : j + 1] * self._read_conv(j)(s)
        return out


def memory_write(memory: Memory, state: MemoryState, feats: torch.Tensor, slot: int) -> MemoryState:
    return memory.write(state, feats, slot)


def memory_read(memory: Memory, state: MemoryState, query: torch.Tensor) -> torch.Tensor:
    return memory.read(state, query)


class Decoder(nn.Module):
    """Maps the 3C-channel fused features back to a full-resolution radiance map.

    Variants share the entry conv and the upsampling tail; only the body
    differs. The body always ends at width C; the tail is two stride-2
    transposed convs followed by a 3-channel projection and softplus.
    """

    def __init__(self, channels: int, variant: str, generator=None):
        super().__init__()
        self.variant = variant
        c = channels
        g = generator
        self.entry = make_conv(3 * c, c, generator=g)
        if variant == "vanilla":
            self.body = nn.ModuleList([make_conv(c, c, generator=g) for _ in range(VANILLA_DEPTH - 1)])
        elif variant == "resnet":
            # entry + 4 blocks of 2 convs = same conv count as vanilla
            self.body = nn.ModuleList(
                [make_conv(c, c, generator=g) for _ in range(VANILLA_DEPTH - 1)]
            )
        elif variant in ("sdc", "sdc_dense"):
            branches, projs = [], []
            for i in range(SDC_BLOCKS):
                cin = c * (i + 1) if variant == "sdc_dense" else c
                branches.append(
                    nn.ModuleList(
                        [make_conv(cin, c, dilation=dil, generator=g) for dil in SDC_DILATIONS]
                    )
                )
                projs.append(make_conv(len(SDC_DILATIONS) * c, c, kernel=1, generator=g))
            self.branches = nn.ModuleList(branches)
            self.projs = nn.ModuleList(projs)
        else:
            raise BadConfig(f"unknown decoder variant {variant!r}")
        self.up1 = make_deconv(c, c, generator=g)
        self.up2 = make_deconv(c, c, generator=g)
        self.out_conv = make_conv(c, 3, generator=g)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        y = act(self.entry(fused))
        if self.variant == "vanilla":
            for conv in self.body:
                y = act(conv(y))
        elif self.variant == "resnet":
            for i in range(0, len(self.body), 2):
                r = act(self.body[i](y))
                y = act(y + self.body[i + 1](r))
        else:
            feats = [y]
            for branch, proj in zip(self.branches, self.projs):
                x = torch.cat(feats, dim=1) if self.variant == "sdc_dense" else feats[-1]
                parallel = torch.cat([act(conv(x)) for conv in branch], dim=1)
                feats.append(act(proj(parallel)))
            y = feats[-1]
        y = act(self.up1(y))
        y = act(self.up2(y))
        return F.softplus(self.out_conv(y))


class FusionModel(nn.Module):
    """Encoder, static/dynamic fusion stages, optional memory, decoder."""

    debug_asserts: bool = False

    def __init__(self, config: ModelConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        c = cfg.feat_channels
        self.encoder = Encoder(cfg.enc_channels, generator)
        self.fuse_static = FusionStage(cfg.agg_channels, c, generator)
        # aliasing, not copying: shared configs expose one underlying module
        self.fuse_dynamic = self.fuse_static if cfg.share_fusion else FusionStage(
            cfg.agg_channels, c, generator
        )
        self.memory = Memory(c, cfg.memory_slots, cfg.share_rw, generator) if cfg.use_memory else None
        self.decoder = Decoder(c, cfg.decoder, generator)

    def encode(self, ldr: torch.Tensor, linear: torch.Tensor) -> torch.Tensor:
        if ldr.shape != linear.shape:
            raise ShapeMismatch(f"{tuple(ldr.shape)} vs {tuple(linear.shape)}")
        return self.encoder(torch.cat([ldr, linear], dim=1))

    def forward_tensors(
        self,
        ldrs: list[torch.Tensor],
        linears: list[torch.Tensor],
        masks: list[torch.Tensor | None],
        reference_index: int,
    ) -> torch.Tensor:
        """Graph-carrying forward on per-image batched tensors (B,3,H,W);
        masks are (B,1,H,W) at input resolution, None for the reference."""
        k_total = len(ldrs)
        if not (len(linears) == len(masks) == k_total):
            raise ArityMismatch(f"{k_total} images vs {len(linears)} linears vs {len(masks)} masks")
        if self.config.aggregator == "concat_fixed_k" and k_total != self.config.K:
            raise ArityMismatch(f"model built for K={self.config.K}, got {k_total} images")

        feats, statics, dynamics = [], [], []
        for k in range(k_total):
            e = self.encode(ldrs[k], linears[k])
            m = masks[k]
            if m is None or k == reference_index:
                m_feat = torch.zeros_like(e[:, :1])
            else:
                if m.shape[2:] != ldrs[k].shape[2:]:
                    raise ShapeMismatch(f"mask {tuple(m.shape[2:])} vs image {tuple(ldrs[k].shape[2:])}")
                m_feat = F.avg_pool2d(m, ENCODER_FACTOR)
            feats.append(e)
            statics.append(e * (1.0 - m_feat))
            dynamics.append(e * m_feat)

        if self.debug_asserts and all(
            m is None or float(m.abs().max()) == 0.0 for m in masks
        ):
            assert all(float(d.abs().max()) == 0.0 for d in dynamics), "dynamic branch not inert"

        s = aggregate(statics, self.config.aggregator, self.config.K)
        d = aggregate(dynamics, self.config.aggregator, self.config.K)
        fs = self.fuse_static(s)
        fd = self.fuse_dynamic(d)
        if self.memory is not None:
            state = self.memory.new_state(feats[0].shape, feats[0].dtype, feats[0].device)
            for k in range(k_total):
                self.memory.write(state, feats[k], k % self.memory.num_slots)
            mem = self.memory.read(state, feats[reference_index])
        else:
            mem = torch.zeros_like(fs)
        return self.decoder(torch.cat([fs, fd, mem], dim=1))


def split_features(feats: torch.Tensor, mask_feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Partition features by a feature-resolution soft mask; the two parts sum
    back to the input exactly."""
    if mask_feat.shape[2:] != feats.shape[2:]:
        raise ShapeMismatch(f"{tuple(mask_feat.shape)} vs {tuple(feats.shape)}")
    return feats * (1.0 - mask_feat), feats * mask_feat


def downsample_mask(mask: torch.Tensor, factor: int = ENCODER_FACTOR) -> torch.Tensor:
    """Area-average a (B,1,H,W) mask down to feature resolution."""
    return F.avg_pool2d(mask, factor)


def aggregate(features: list[torch.Tensor], mode: str, k_expected: int | None = None) -> torch.Tensor:
    """Order-sensitive channel concat (concat_fixed_k) or the order-invariant
    concat of elementwise mean and max (mean_max, 2C channels for any K)."""
    if not features:
        raise ArityMismatch("need at least one feature tensor")
    if mode == "concat_fixed_k":
        if k_expected is not None and len(features) != k_expected:
            raise ArityMismatch(f"expected {k_expected} tensors, got {len(features)}")
        return torch.cat(features, dim=1)
    if mode == "mean_max":
        stacked = torch.stack(features, dim=0)
        return torch.cat([stacked.mean(dim=0), stacked.max(dim=0).values], dim=1)
    raise BadConfig(f"unknown aggregator {mode!r}")


def stack_to_tensors(
    stack: ExposureStack,
    masks: list[MotionMask],
    dtype=torch.float32,
    gamma: float = GAMMA_DEFAULT,
):
    """LDR, linear-domain, and mask tensors for one stack (batch of 1)."""
    by_source = {m.source_index: m for m in masks}
    ldrs, linears, mask_ts = [], [], []
    for k, img in enumerate(stack.images):
        ldrs.append(torch.as_tensor(img.transpose(2, 0, 1)[None], dtype=dtype))
        lin = ldr_to_hdr_domain(img, stack.exposure_times[k], gamma)
        linears.append(torch.as_tensor(lin.transpose(2, 0, 1)[None], dtype=dtype))
        if k == stack.reference_index:
            mask_ts.append(None)
        else:
            if k not in by_source:
                raise ArityMismatch(f"no mask supplied for non-reference image {k}")
            mask_ts.append(torch.as_tensor(by_source[k].values[None, None], dtype=dtype))
    return ldrs, linears, mask_ts


def forward(model: FusionModel, stack: ExposureStack, masks: list[MotionMask]) -> RadianceImage:
    """Inference entry point: stack + per-source masks in, radiance map out."""
    dtype = next(model.parameters()).dtype
    ldrs, linears, mask_ts = stack_to_tensors(stack, masks, dtype=dtype)
    with torch.no_grad():
        out = model.forward_tensors(ldrs, linears, mask_ts, stack.reference_index)
    return RadianceImage(values=out[0].cpu().numpy().transpose(1, 2, 0).astype(np.float64))


__all__ = [
    "AGGREGATORS",
    "DECODER_VARIANTS",
    "Decoder",
    "Encoder",
    "FusionModel",
    "FusionStage",
    "Memory",
    "MemoryState",
    "ModelConfig",
    "aggregate",
    "count_params",
    "downsample_mask",
    "forward",
    "memory_read",
    "memory_write",
    "split_features",
    "stack_to_tensors",
]
