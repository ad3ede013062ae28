"""Single-file checkpoint archive: magic, JSON header (kind, config echo,
tensor table), then raw little-endian tensor bytes. Self-describing, so a
model is rebuilt from the header alone."""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np
import torch

from .errors import CorruptHeader, MissingFile
from .fusion import FusionModel, ModelConfig
from .segmentation import SegmenterConfig, SegNet

MAGIC = b"HDRF\x01"

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _header_and_tensors(model, kind: str, config) -> tuple[dict, list]:
    names, tensors, table = [], [], []
    for name, p in model.named_parameters():  # aliased tensors appear once
        names.append(name)
        tensors.append(p.detach().cpu())
        table.append({"name": name, "shape": list(p.shape), "dtype": str(p.dtype).replace("torch.", "")})
    header = {"kind": kind, "config": dataclasses.asdict(config), "tensors": table}
    return header, tensors


def save_checkpoint(model, path) -> None:
    if isinstance(model, SegNet):
        header, tensors = _header_and_tensors(model, "segmentation", model.config)
    elif isinstance(model, FusionModel):
        header, tensors = _header_and_tensors(model, "fusion", model.config)
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in tensors:
            arr = t.numpy()
            if arr.dtype.name not in _DTYPES:
                raise TypeError(f"unsupported dtype {arr.dtype}")
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_header(path):
    try:
        f = open(path, "rb")
    except FileNotFoundError as e:
        raise MissingFile(str(path)) from e
    with f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptHeader(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise CorruptHeader(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise CorruptHeader(f"{path}: truncated header")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as e:
            raise CorruptHeader(f"{path}: header is not valid JSON") from e
        payload = f.read()
    for key in ("kind", "config", "tensors"):
        if key not in header:
            raise CorruptHeader(f"{path}: header missing {key!r}")
    return header, payload


def _load_into(model, header, payload, path):
    params = dict(model.named_parameters())
    offset = 0
    seen = set()
    with torch.no_grad():
        for rec in header["tensors"]:
            name, shape, dtype = rec["name"], tuple(rec["shape"]), rec["dtype"]
            if dtype not in _DTYPES:
                raise CorruptHeader(f"{path}: unsupported dtype {dtype!r}")
            if name not in params:
                raise CorruptHeader(f"{path}: unknown tensor {name!r}")
            p = params[name]
            if tuple(p.shape) != shape:
                raise CorruptHeader(f"{path}: {name} shape {shape} != model {tuple(p.shape)}")
            np_dtype = np.dtype(_DTYPES[dtype]).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
            chunk = payload[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CorruptHeader(f"{path}: truncated tensor data for {name!r}")
            offset += nbytes
            arr = np.frombuffer(chunk, dtype=np_dtype).reshape(shape).copy()
            p.copy_(torch.as_tensor(arr, dtype=p.dtype))
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CorruptHeader(f"{path}: missing tensors {sorted(missing)}")
    if offset != len(payload):
        raise CorruptHeader(f"{path}: {len(payload) - offset} trailing bytes")
    return model


def load_seg_checkpoint(path) -> SegNet:
    header, payload = _read_header(path)
    if header["kind"] != "segmentation":
        raise CorruptHeader(f"{path}: kind {header['kind']!r}, expected segmentation")
    model = SegNet(SegmenterConfig(**header["config"]))
    if header["tensors"] and header["tensors"][0]["dtype"] == "float64":
        model.double()
    return _load_into(model, header, payload, path)


def load_fusion_checkpoint(path) -> FusionModel:
    header, payload = _read_header(path)
    if header["kind"] != "fusion":
        raise CorruptHeader(f"{path}: kind {header['kind']!r}, expected fusion")
    model = FusionModel(ModelConfig(**header["config"]))
    if header["tensors"] and header["tensors"][0]["dtype"] == "float64":
        model.double()
    return _load_into(model, header, payload, path)


def load_checkpoint(path):
    """Dispatch on the kind recorded in the header."""
    header, _ = _read_header(path)
    if header["kind"] == "segmentation":
        return load_seg_checkpoint(path)
    if header["kind"] == "fusion":
        return load_fusion_checkpoint(path)
    raise CorruptHeader(f"{path}: unknown kind {header['kind']!r}")
