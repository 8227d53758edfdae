"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DETL" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_blobs | n_blobs * blob | 32-byte SHA-256 of everything before it

    blob = u32 layer_index | u8 name_len | name | u8 ndim | ndim * u32 dims | f32 LE values
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .models import PRESETS, LayerSpec, ModelGraph, build_preset
from .ops import ShapeError
from .tensor import Tensor

MAGIC = b"DETL"
VERSION = 1
DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


def _meta(model: ModelGraph) -> dict:
    return {
        "preset": model.preset,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "class_names": list(model.class_names) if model.class_names else None,
        "widths": list(model.widths),
        "layers": [asdict(layer) for layer in model.layers],
    }


def to_bytes(model: ModelGraph) -> bytes:
    meta = json.dumps(_meta(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    blobs = [(i, name, t.data) for i, p in sorted(model.params.items()) for name, t in sorted(p.items())]
    parts.append(struct.pack("<I", len(blobs)))
    for i, name, arr in blobs:
        enc = name.encode("ascii")
        parts.append(struct.pack("<IB", i, len(enc)) + enc + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes, preset: Optional[str] = None) -> ModelGraph:
    """Decode a checkpoint; ``preset`` forces the architecture it must load into."""
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a DETL checkpoint")
    if len(buf) < 4 + 8 + DIGEST_SIZE:
        raise CheckpointError("checkpoint is truncated")
    body, digest = buf[:-DIGEST_SIZE], buf[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    r = _Reader(body)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n_blobs,) = r.unpack("<I")
    blobs: dict[int, dict[str, np.ndarray]] = {}
    for _ in range(n_blobs):
        layer, name_len = r.unpack("<IB")
        name = r.take(name_len).decode("ascii")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        blobs.setdefault(layer, {})[name] = arr
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter blobs")

    known = {f.name for f in fields(LayerSpec)}
    layers = [LayerSpec(**{k: v for k, v in spec.items() if k in known}) for spec in meta["layers"]]
    widths = tuple(meta["widths"])
    if preset is not None and preset != meta["preset"]:
        if preset not in PRESETS:
            raise CheckpointError(f"unknown preset {preset!r}")
        template = build_preset(preset, tuple(meta["input_shape"]), meta["num_classes"])
        _check_shapes(template, blobs)
        layers, widths = [LayerSpec(**asdict(l)) for l in template.layers], template.widths
    elif meta["preset"] in PRESETS:
        template = build_preset(meta["preset"], tuple(meta["input_shape"]), meta["num_classes"],
                                widths=meta["widths"] or None, units=_units(layers))
        if [(l.kind, l.block) for l in template.layers] != [(l.kind, l.block) for l in layers]:
            raise ShapeError(f"checkpoint layers do not match preset {meta['preset']}")
    params = {}
    for i, layer in enumerate(layers):
        expected = layer.param_shapes()
        got = blobs.get(i, {})
        if {k: v.shape for k, v in got.items()} != expected:
            raise ShapeError(f"layer {i}: stored parameters {[v.shape for v in got.values()]} do not match {expected}")
        if expected:
            params[i] = {k: Tensor(v, requires_grad=layer.trainable) for k, v in got.items()}
    names = tuple(meta["class_names"]) if meta["class_names"] else None
    return ModelGraph(layers, params, tuple(meta["input_shape"]), meta["num_classes"], preset=preset or meta["preset"],
                      class_names=names, widths=widths)


def _units(layers: list[LayerSpec]) -> tuple[int, ...]:
    dense = [l.out_features for l in layers if l.kind == "dense"]
    return tuple(dense[:-1])


def _check_shapes(template: ModelGraph, blobs: dict[int, dict[str, np.ndarray]]) -> None:
    for i, layer in enumerate(template.layers):
        expected = layer.param_shapes()
        got = {k: v.shape for k, v in blobs.get(i, {}).items()}
        if got != expected:
            raise ShapeError(f"checkpoint does not fit {template.preset}: layer {i} expects {expected}, found {got}")
    if set(blobs) - set(template.params):
        raise ShapeError(f"checkpoint does not fit {template.preset}: extra parameter blobs")


def load_checkpoint(path, preset: Optional[str] = None) -> ModelGraph:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), preset)
