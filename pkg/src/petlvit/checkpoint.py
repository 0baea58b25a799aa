"""Binary checkpoints: 8-byte magic, u32 LE header length, JSON header, raw LE payload."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .petl import PETLSpec, install_hooks
from .vit import ParamRegistry, ViT, ViTConfig, is_backbone

MAGIC = b"PETL0001"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(IOError):
    pass


class MagicMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class LayoutError(CheckpointError):
    """Header and payload disagree: shapes, offsets, coverage or an unknown field value."""


def _header(model: ViT) -> tuple[dict, list[bytes]]:
    tensors, chunks, offset = [], [], 0
    for name, p in model.registry.items():
        arr = p.tensor.data
        code = _CODES.get(arr.dtype)
        if code is None:
            raise LayoutError(f"{name}: dtype {arr.dtype} is not serialisable")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": code, "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    spec = model.petl_spec
    header = {
        "format_version": FORMAT_VERSION,
        "vit_config": dataclasses.asdict(model.cfg),
        "petl_spec": dataclasses.asdict(spec) if isinstance(spec, PETLSpec) else None,
        "tensors": tensors,
        "frozen": [n for n, p in model.registry.items() if p.frozen],
    }
    return header, chunks


def to_bytes(model: ViT) -> bytes:
    header, chunks = _header(model)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model: ViT, path) -> bytes:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return data


def _parse_header(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < len(MAGIC):
        raise TruncatedCheckpoint(f"{len(data)} bytes is shorter than the magic")
    if data[:8] != MAGIC:
        raise MagicMismatch(f"magic {data[:8]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise TruncatedCheckpoint("missing header length")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise TruncatedCheckpoint(f"header declares {hlen} bytes, {len(data) - 12} present")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LayoutError(f"unreadable header: {e}") from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise LayoutError(f"unsupported format_version {header.get('format_version') if isinstance(header, dict) else None}")
    return header, memoryview(data)[12 + hlen:]


def from_bytes(data: bytes) -> ViT:
    header, payload = _parse_header(data)
    try:
        cfg = ViTConfig(**header["vit_config"])
        spec = PETLSpec(**header["petl_spec"]) if header["petl_spec"] is not None else None
        entries = header["tensors"]
        frozen = set(header["frozen"])
    except (KeyError, TypeError, ValueError) as e:
        raise LayoutError(f"malformed header: {e}") from None

    reg = ParamRegistry()
    expected = 0
    for e in entries:
        name, dtype = e["name"], _DTYPES.get(e["dtype"])
        if dtype is None:
            raise LayoutError(f"{name}: unknown dtype {e['dtype']!r}")
        if e["byte_offset"] != expected:
            raise LayoutError(f"{name}: byte_offset {e['byte_offset']}, expected {expected}")
        shape = tuple(int(s) for s in e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        end = expected + nbytes
        if end > len(payload):
            raise TruncatedCheckpoint(f"{name}: payload ends at byte {len(payload)}, tensor needs {end}")
        arr = np.frombuffer(payload[expected:end], dtype=dtype).reshape(shape)
        reg.add(name, arr.astype(dtype.newbyteorder("="), copy=True), "checkpoint", frozen=name in frozen)
        expected = end
    if expected != len(payload):
        raise LayoutError(f"{len(payload) - expected} trailing payload bytes not covered by any tensor")
    unknown = frozen - set(reg)
    if unknown:
        raise LayoutError(f"frozen list names missing tensors: {sorted(unknown)}")

    model = ViT(cfg, reg)
    if spec is not None:
        install_hooks(model, spec)
    return model


def load_checkpoint(path) -> ViT:
    return from_bytes(Path(path).read_bytes())


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def checkpoint_digest(model: ViT) -> str:
    return digest(to_bytes(model))


def backbone_digest(model: ViT, names: Optional[list[str]] = None) -> str:
    """Hash of backbone tensor names and bytes (head and adaptation tensors excluded)."""
    h = hashlib.sha256()
    for name in names if names is not None else [n for n in model.registry if is_backbone(n)]:
        arr = model.registry[name].data
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
