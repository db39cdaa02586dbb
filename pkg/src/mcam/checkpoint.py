"""Versioned binary checkpoints.

Layout (all little-endian):
  magic "AMCK" | version u32 | config blob (u32 len + utf8) |
  rng-state blob (u32 len + utf8 json) | epoch u32 | tensor count u32 |
  per tensor: name (u32 len + utf8), ndim u32, dims u32 each, float64 data.

save -> load -> save is byte-identical; loads validate magic, version, and,
when target dims are supplied, every tensor shape.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .acoustic import LstmParams, ModelDims, ModelParams
from .attend import AttentionParams
from .errors import CheckpointError
from .learn import param_items

CHECKPOINT_MAGIC = b"AMCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config_text: str
    rng_state: dict
    epoch: int
    tensors: dict[str, np.ndarray]  # insertion order = file order


def _expected_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if dims.attention:
        shapes["attention.w_state"] = (dims.hidden, dims.cells)
        shapes["attention.w_attn"] = (dims.cells, dims.cells)
        shapes["attention.w_feat"] = (dims.input_dim, dims.cells)
        if dims.phase_bands:
            shapes["attention.w_phase"] = (dims.phase_dim, dims.cells)
        shapes["attention.bias"] = (dims.cells,)
    for name in ("w_xi", "w_xf", "w_xc", "w_xo"):
        shapes[f"lstm.{name}"] = (dims.input_dim, dims.hidden)
    for name in ("w_hi", "w_hf", "w_hc", "w_ho"):
        shapes[f"lstm.{name}"] = (dims.hidden, dims.hidden)
    shapes["lstm.w_out"] = (dims.hidden, dims.classes)
    shapes["lstm.b_out"] = (dims.classes,)
    return shapes


def save_checkpoint(
    params: ModelParams,
    path,
    config_text: str = "",
    rng_state: dict | None = None,
    epoch: int = 0,
) -> None:
    tensors = param_items(params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        config_bytes = config_text.encode("utf-8")
        out.write(struct.pack("<I", len(config_bytes)))
        out.write(config_bytes)
        rng_bytes = json.dumps(rng_state or {}, sort_keys=True).encode("utf-8")
        out.write(struct.pack("<I", len(rng_bytes)))
        out.write(rng_bytes)
        out.write(struct.pack("<I", epoch))
        out.write(struct.pack("<I", len(tensors)))
        for name, values in tensors:
            name_bytes = name.encode("utf-8")
            out.write(struct.pack("<I", len(name_bytes)))
            out.write(name_bytes)
            out.write(struct.pack("<I", values.ndim))
            out.write(struct.pack(f"<{values.ndim}I", *values.shape))
            out.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    os.replace(tmp, path)


def _read_exact(src, count: int, path, what: str) -> bytes:
    data = src.read(count)
    if len(data) != count:
        raise CheckpointError(f"{path}: truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path, dims: ModelDims | None = None) -> Checkpoint:
    """Read and validate a checkpoint; never returns a partial load."""
    with open(path, "rb") as src:
        magic = _read_exact(src, 4, path, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(src, 4, path, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (config_len,) = struct.unpack("<I", _read_exact(src, 4, path, "config length"))
        config_text = _read_exact(src, config_len, path, "config").decode("utf-8")
        (rng_len,) = struct.unpack("<I", _read_exact(src, 4, path, "rng length"))
        rng_state = json.loads(_read_exact(src, rng_len, path, "rng state").decode("utf-8"))
        (epoch,) = struct.unpack("<I", _read_exact(src, 4, path, "epoch"))
        (count,) = struct.unpack("<I", _read_exact(src, 4, path, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(src, 4, path, "tensor name length"))
            name = _read_exact(src, name_len, path, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(src, 4, path, f"{name} ndim"))
            shape = struct.unpack(
                f"<{ndim}I", _read_exact(src, 4 * ndim, path, f"{name} dims")
            )
            n_values = int(np.prod(shape)) if ndim else 1
            data = _read_exact(src, 8 * n_values, path, f"{name} data")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        if src.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor table")
    checkpoint = Checkpoint(
        version=version,
        config_text=config_text,
        rng_state=rng_state,
        epoch=epoch,
        tensors=tensors,
    )
    if dims is not None:
        validate_against_dims(checkpoint, dims, path)
    return checkpoint


def validate_against_dims(checkpoint: Checkpoint, dims: ModelDims, path="checkpoint") -> None:
    expected = _expected_shapes(dims)
    if set(checkpoint.tensors) != set(expected):
        missing = sorted(set(expected) - set(checkpoint.tensors))
        extra = sorted(set(checkpoint.tensors) - set(expected))
        raise CheckpointError(
            f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        actual = checkpoint.tensors[name].shape
        if actual != shape:
            raise CheckpointError(
                f"{path}: {name} has dims {actual}, config expects {shape}"
            )


def params_from_checkpoint(checkpoint: Checkpoint, dims: ModelDims) -> ModelParams:
    validate_against_dims(checkpoint, dims)
    t = checkpoint.tensors
    attention = None
    if dims.attention:
        attention = AttentionParams(
            w_state=t["attention.w_state"],
            w_attn=t["attention.w_attn"],
            w_feat=t["attention.w_feat"],
            w_phase=t.get("attention.w_phase"),
            bias=t["attention.bias"],
        )
    lstm = LstmParams(**{name: t[f"lstm.{name}"] for name in (
        "w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho", "w_out", "b_out"
    )})
    return ModelParams(attention=attention, lstm=lstm)
