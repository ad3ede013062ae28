"""Shared network building blocks: deterministic Glorot-uniform initialization,
convolution constructors, activations, parameter counting, and NaN guards."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import NumericError

LEAKY_SLOPE = 0.1


def glorot_init(weight: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fill ``weight`` in place with Glorot/Xavier uniform values.

    For conv weights shaped (out, in, kh, kw), fan_in = in*kh*kw and
    fan_out = out*kh*kw; bound = sqrt(6 / (fan_in + fan_out)).
    """
    shape = weight.shape
    if len(shape) < 2:
        raise ValueError(f"need at least 2-d weight, got {tuple(shape)}")
    receptive = 1
    for s in shape[2:]:
        receptive *= s
    fan_out = shape[0] * receptive
    fan_in = shape[1] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


def make_conv(
    cin: int,
    cout: int,
    kernel: int = 3,
    *,
    stride: int = 1,
    dilation: int = 1,
    bias: bool = True,
    generator: torch.Generator | None = None,
) -> nn.Conv2d:
    """3x3-style conv with "same" padding for odd kernels, Glorot weights,
    zero bias."""
    pad = dilation * (kernel - 1) // 2
    conv = nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation, bias=bias)
    glorot_init(conv.weight, generator)
    if bias:
        with torch.no_grad():
            conv.bias.zero_()
    return conv


def make_deconv(
    cin: int,
    cout: int,
    kernel: int = 4,
    *,
    stride: int = 2,
    padding: int = 1,
    bias: bool = True,
    generator: torch.Generator | None = None,
) -> nn.ConvTranspose2d:
    """Stride-2 transposed conv that exactly doubles spatial size with the
    default kernel 4 / padding 1."""
    deconv = nn.ConvTranspose2d(cin, cout, kernel, stride=stride, padding=padding, bias=bias)
    # transposed conv weight is (in, out, kh, kw); swap fans accordingly
    w = deconv.weight
    receptive = w.shape[2] * w.shape[3]
    fan_in = w.shape[0] * receptive
    fan_out = w.shape[1] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=generator)
        if bias:
            deconv.bias.zero_()
    return deconv


def act(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)


def count_params(module: nn.Module) -> int:
    """Number of trainable scalars, counting shared tensors once."""
    seen = {}
    for p in module.parameters():
        if p.requires_grad:
            seen[id(p)] = p.numel()
    return sum(seen.values())


def check_finite(t: torch.Tensor, where: str = "output") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}")
    return t


def install_nan_guard(module: nn.Module) -> list:
    """Forward hooks that raise NumericError naming the first offending layer."""
    handles = []
    for name, m in module.named_modules():
        def hook(mod, inputs, output, _name=name):
            if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                label = _name or mod.__class__.__name__
                raise NumericError(f"non-finite output at {label}")
        handles.append(m.register_forward_hook(hook))
    return handles
