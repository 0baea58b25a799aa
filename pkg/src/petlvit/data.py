"""Toy image-classification tasks: seeded synthetic textures and IDX files."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TASK_KINDS = ("synthetic-textures", "idx-files")


class IdxFormatError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ToyTaskSpec:
    kind: str = "synthetic-textures"
    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    shots: int = 16
    val_per_class: int = 4
    test_per_class: int = 50
    pool_per_class: Optional[int] = None
    seed: int = 0
    signature_seed: int = 0
    noise: float = 0.5
    phase_jitter: float = 0.0
    max_frequency: float = 6.0
    idx_images: str = ""
    idx_labels: str = ""

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}")
        if self.num_classes < 1 or self.shots < 1:
            raise DatasetError("num_classes and shots must be >= 1")
        if self.val_per_class < 0 or self.test_per_class < 0:
            raise DatasetError("val_per_class and test_per_class must be >= 0")

    @property
    def per_class_needed(self) -> int:
        return self.shots + self.val_per_class + self.test_per_class


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int


# ---------------------------------------------------------------------------
# synthetic textures


@dataclass(frozen=True)
class Grating:
    frequency: float  # cycles per image
    angle: float
    phase: float
    amplitude: float
    colour: tuple


def class_signatures(num_classes: int, channels: int, signature_seed: int,
                     max_frequency: float = 6.0) -> list[list[Grating]]:
    """2-3 gratings per class; a pure function of the seed."""
    rng = np.random.default_rng([signature_seed, 0x5157])
    out = []
    for _ in range(num_classes):
        gs = []
        for _ in range(int(rng.integers(2, 4))):
            colour = rng.standard_normal(channels)
            colour /= np.linalg.norm(colour) + 1e-12
            gs.append(Grating(float(rng.uniform(1.0, max_frequency)), float(rng.uniform(0, math.pi)),
                              float(rng.uniform(0, 2 * math.pi)), float(rng.uniform(0.5, 1.0)),
                              tuple(float(c) for c in colour)))
        out.append(gs)
    return out


def render(gratings: list[Grating], n: int, size: int, channels: int, rng: np.random.Generator,
           noise: float, phase_jitter: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((n, channels, size, size))
    for g in gratings:
        proj = (xx * math.cos(g.angle) + yy * math.sin(g.angle)) * (2 * math.pi * g.frequency / size)
        shift = rng.uniform(-math.pi, math.pi, size=n) * phase_jitter
        wave = np.sin(proj[None] + g.phase + shift[:, None, None])
        img += g.amplitude * np.asarray(g.colour)[None, :, None, None] * wave[:, None]
    if noise > 0:
        img += noise * rng.standard_normal(img.shape)
    return img


def make_synthetic(spec: ToyTaskSpec) -> Dataset:
    pool = spec.pool_per_class or spec.per_class_needed
    if spec.per_class_needed > pool:
        raise DatasetError(f"{spec.per_class_needed} samples per class requested, pool holds {pool}")
    sigs = class_signatures(spec.num_classes, spec.channels, spec.signature_seed, spec.max_frequency)
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for c, gs in enumerate(sigs):
        rng = np.random.default_rng([spec.seed, spec.signature_seed, c])
        imgs = render(gs, pool, spec.image_size, spec.channels, rng, spec.noise, spec.phase_jitter)
        a, b = spec.shots, spec.shots + spec.val_per_class
        for name, sl in (("train", slice(0, a)), ("val", slice(a, b)), ("test", slice(b, b + spec.test_per_class))):
            parts[name].append((imgs[sl], np.full(len(imgs[sl]), c, dtype=np.int64)))
    return Dataset(*(_stack(parts[k], spec) for k in ("train", "val", "test")), num_classes=spec.num_classes)


def _stack(chunks, spec: ToyTaskSpec) -> Split:
    if not chunks:
        return Split(np.zeros((0, spec.channels, spec.image_size, spec.image_size), np.float32), np.zeros(0, np.int64))
    images = np.concatenate([c[0] for c in chunks]).astype(np.float32)
    labels = np.concatenate([c[1] for c in chunks])
    return Split(images, labels)


# ---------------------------------------------------------------------------
# IDX files

_IDX_DTYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
               0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path, expect_magic: Optional[int] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 16 != 0:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"{path}: unsupported IDX type 0x{magic:08x}")
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = _IDX_DTYPES[code]
    expected = head + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: payload is {len(raw) - head} bytes, header implies {expected - head}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX encoding")
    header = struct.pack(">I", (code << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_DTYPES[code]).tobytes())


def _resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images
    ri = (np.arange(size) * h) // size
    ci = (np.arange(size) * w) // size
    return images[..., ri[:, None], ci[None, :]]


def make_from_idx(spec: ToyTaskSpec) -> Dataset:
    images = read_idx(spec.idx_images, IDX_IMAGES_MAGIC)
    labels = read_idx(spec.idx_labels, IDX_LABELS_MAGIC).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise IdxFormatError(f"image array {images.shape} and label array {labels.shape} do not pair up")
    x = images.astype(np.float32)[:, None] / 255.0
    x = _resize_nearest(x, spec.image_size)
    x = np.repeat(x, spec.channels, axis=1)
    order = np.random.default_rng(spec.seed).permutation(len(labels))
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for c in range(spec.num_classes):
        idx = order[labels[order] == c]
        if len(idx) < spec.per_class_needed:
            raise DatasetError(f"class {c} has {len(idx)} samples, {spec.per_class_needed} requested")
        a, b = spec.shots, spec.shots + spec.val_per_class
        for name, sl in (("train", idx[:a]), ("val", idx[a:b]), ("test", idx[b:b + spec.test_per_class])):
            parts[name].append((x[sl], labels[sl]))
    return Dataset(*(_stack(parts[k], spec) for k in ("train", "val", "test")), num_classes=spec.num_classes)


def make_toy_dataset(spec: ToyTaskSpec) -> Dataset:
    if spec.kind == "idx-files":
        return make_from_idx(spec)
    return make_synthetic(spec)
