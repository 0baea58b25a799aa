"""Pre-norm Vision Transformer built on :mod:`petlvit.tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

HEAD_PREFIX = "head."
PETL_PREFIX = "petl."


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 3
    dim: int = 16
    depth: int = 2
    num_heads: int = 2
    mlp_dim: int = 32
    num_classes: int = 10

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "dim", "num_heads", "mlp_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 0:
            raise ValueError(f"depth must be non-negative, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.dim % self.num_heads:
            raise ValueError(f"dim {self.dim} is not divisible by num_heads {self.num_heads}")
        if self.mlp_dim < self.dim:
            raise ValueError(f"mlp_dim {self.mlp_dim} must be >= dim {self.dim}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size ** 2 + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


VIT_B16 = ViTConfig(image_size=224, patch_size=16, in_channels=3, dim=768, depth=12,
                    num_heads=12, mlp_dim=3072, num_classes=1000)


@dataclass
class Param:
    tensor: Tensor
    frozen: bool = False
    init: str = "zeros"


class ParamRegistry:
    """Ordered name -> parameter store. Iteration follows insertion order."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, init: str, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(value, requires_grad=not frozen)
        self._params[name] = Param(t, frozen, init)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def param(self, name: str) -> Param:
        return self._params[name]

    def set_frozen(self, name: str, frozen: bool):
        p = self._params[name]
        p.frozen = frozen
        p.tensor.requires_grad = not frozen
        if frozen:
            p.tensor.grad = None

    def is_frozen(self, name: str) -> bool:
        return self._params[name].frozen

    def replace(self, name: str, value: np.ndarray, init: str):
        """Swap in a new tensor (any shape) at the same position, keeping the frozen flag."""
        old = self._params[name]
        self._params[name] = Param(Tensor(value, requires_grad=not old.frozen), old.frozen, init)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p.tensor) for n, p in self._params.items() if not p.frozen]

    def view(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix`` keyed by the remaining suffix."""
        k = len(prefix)
        return {n[k:]: p.tensor for n, p in self._params.items() if n.startswith(prefix)}

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    def copy(self) -> "ParamRegistry":
        out = ParamRegistry()
        for n, p in self._params.items():
            out.add(n, p.tensor.data.copy(), p.init, p.frozen)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for n, arr in state.items():
            t = self._params[n].tensor
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()


def is_backbone(name: str) -> bool:
    return not (name.startswith(HEAD_PREFIX) or name.startswith(PETL_PREFIX))


def is_bias(name: str) -> bool:
    return name.endswith(".bias")


def init_array(scheme: str, shape: tuple, rng: Optional[np.random.Generator], dtype, abstract: bool = False,
               fan: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Draw a parameter. ``abstract`` returns a read-only zero view (shape-only registries)."""
    if abstract:
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    if scheme == "normal0.02":
        return (rng.standard_normal(shape) * 0.02).astype(dtype)
    if scheme == "xavier_uniform":
        fan_in, fan_out = fan if fan is not None else (shape[0], shape[1])
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=shape).astype(dtype)
    raise ValueError(f"unknown init scheme {scheme!r}")


def conv_fan(shape: tuple) -> tuple[int, int]:
    cout, cin, k, _ = shape
    return cin * k * k, cout * k * k


def init_vit_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32, abstract: bool = False) -> ParamRegistry:
    rng = np.random.default_rng(seed)
    reg = ParamRegistry()
    d, D = cfg.dim, cfg.mlp_dim
    patch_in = cfg.in_channels * cfg.patch_size ** 2

    def add(name, shape, scheme, fan=None):
        reg.add(name, init_array(scheme, shape, rng, dtype, abstract, fan), scheme)

    add("patch_embed.weight", (patch_in, d), "xavier_uniform")
    add("patch_embed.bias", (d,), "zeros")
    add("cls_token", (1, d), "normal0.02")
    add("pos_embed", (cfg.num_tokens, d), "normal0.02")
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        add(b + "norm1.weight", (d,), "ones")
        add(b + "norm1.bias", (d,), "zeros")
        for proj in ("q", "k", "v", "proj"):
            add(b + f"attn.{proj}.weight", (d, d), "xavier_uniform")
            add(b + f"attn.{proj}.bias", (d,), "zeros")
        add(b + "norm2.weight", (d,), "ones")
        add(b + "norm2.bias", (d,), "zeros")
        add(b + "mlp.fc1.weight", (d, D), "xavier_uniform")
        add(b + "mlp.fc1.bias", (D,), "zeros")
        add(b + "mlp.fc2.weight", (D, d), "xavier_uniform")
        add(b + "mlp.fc2.bias", (d,), "zeros")
    add("norm.weight", (d,), "ones")
    add("norm.bias", (d,), "zeros")
    add("head.weight", (d, cfg.num_classes), "xavier_uniform")
    add("head.bias", (cfg.num_classes,), "zeros")
    return reg


def reset_head(reg: ParamRegistry, num_classes: int, seed: int):
    """Replace the classifier with a fresh one (Xavier weight, zero bias), keeping registry order."""
    rng = np.random.default_rng(seed)
    w = reg["head.weight"]
    d, dtype = w.shape[0], w.dtype
    reg.replace("head.weight", init_array("xavier_uniform", (d, num_classes), rng, dtype), "xavier_uniform")
    reg.replace("head.bias", np.zeros((num_classes,), dtype=dtype), "zeros")


# ---------------------------------------------------------------------------
# blocks


def patch_embed(images: Tensor, cfg: ViTConfig, reg: ParamRegistry) -> Tensor:
    images = T.as_tensor(images)
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
        raise T.ShapeError(
            f"patch_embed: expected images [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], "
            f"got {images.shape}")
    b = images.shape[0]
    n, p, c = cfg.grid_size, cfg.patch_size, cfg.in_channels
    x = images.reshape(b, c, n, p, n, p)
    x = T.transpose(x, (0, 2, 4, 1, 3, 5)).reshape(b, n * n, c * p * p)
    x = x @ reg["patch_embed.weight"] + reg["patch_embed.bias"]
    cls = T.expand(reg["cls_token"].reshape(1, 1, cfg.dim), (b, 1, cfg.dim))
    x = T.concat_rows(cls, x)
    return x + reg["pos_embed"]


def _linear(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return h @ w + b


def mhsa_block(x: Tensor, p: dict, num_heads: int,
               project: Optional[Callable[[str, Tensor, Tensor, Tensor], Tensor]] = None) -> Tensor:
    """Multi-head self-attention. ``p`` maps 'q.weight', 'q.bias', ... 'proj.bias' to tensors.

    ``project(name, h, w, b)`` can override the q/k/v projections (LoRA hooks in here).
    """
    bsz, n, d = x.shape
    if d % num_heads:
        raise T.ShapeError(f"mhsa_block: width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    proj = project or (lambda name, h, w, b: _linear(h, w, b))

    def heads(name):
        t = proj(name, x, p[f"{name}.weight"], p[f"{name}.bias"])
        return T.transpose(t.reshape(bsz, n, num_heads, dh), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = T.scale(q @ T.transpose(k), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.transpose(attn @ v, (0, 2, 1, 3)).reshape(bsz, n, d)
    return _linear(out, p["proj.weight"], p["proj.bias"])


def attention_weights(x: Tensor, p: dict, num_heads: int, project=None) -> np.ndarray:
    """Row-stochastic attention matrices [B, heads, N, N] for a given block input."""
    bsz, n, d = x.shape
    dh = d // num_heads
    proj = project or (lambda name, h, w, b: _linear(h, w, b))
    with T.no_grad():
        q, k = (proj(name, x, p[f"{name}.weight"], p[f"{name}.bias"]).data
                .reshape(bsz, n, num_heads, dh).transpose(0, 2, 1, 3) for name in ("q", "k"))
        s = T.softmax(T.Tensor(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)), axis=-1)
    return s.data


def mlp_block(x: Tensor, p: dict) -> Tensor:
    return _linear(T.gelu(_linear(x, p["fc1.weight"], p["fc1.bias"])), p["fc2.weight"], p["fc2.bias"])


class Adaptation:
    """No-op hook set; :class:`petlvit.petl.PETLAdaptation` overrides these."""

    def extend(self, layer: int, x: Tensor) -> Tensor:
        return x

    def trim(self, layer: int, x: Tensor, n: int) -> Tensor:
        return x

    def project(self, layer: int, name: str, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return _linear(h, w, b)

    def parallel(self, layer: int, site: str, h: Tensor) -> Optional[Tensor]:
        return None

    def after(self, layer: int, site: str, y: Tensor) -> Tensor:
        return y


NO_ADAPTATION = Adaptation()


def residual_unit(x: Tensor, layer: int, site: str, cfg: ViTConfig, reg: ParamRegistry,
                  ad: Adaptation = NO_ADAPTATION) -> Tensor:
    """X + Block(LN(X)) [+ parallel bypass(LN(X))], then any sequential module."""
    pre = f"blocks.{layer}."
    if site == "attn":
        h = T.layernorm(x, reg[pre + "norm1.weight"], reg[pre + "norm1.bias"])
        out = mhsa_block(h, reg.view(pre + "attn."), cfg.num_heads,
                         project=lambda name, hh, w, b: ad.project(layer, name, hh, w, b))
    elif site == "mlp":
        h = T.layernorm(x, reg[pre + "norm2.weight"], reg[pre + "norm2.bias"])
        out = mlp_block(h, reg.view(pre + "mlp."))
    else:
        raise ValueError(f"unknown site {site!r}")
    y = x + out
    bypass = ad.parallel(layer, site, h)
    if bypass is not None:
        y = y + bypass
    return ad.after(layer, site, y)


def vit_forward(images, cfg: ViTConfig, reg: ParamRegistry, adaptation: Optional[Adaptation] = None) -> Tensor:
    ad = adaptation or NO_ADAPTATION
    x = patch_embed(images, cfg, reg)
    for i in range(cfg.depth):
        n = x.shape[1]
        x = ad.extend(i, x)
        x = residual_unit(x, i, "attn", cfg, reg, ad)
        x = residual_unit(x, i, "mlp", cfg, reg, ad)
        x = ad.trim(i, x, n)
        if x.shape[1] != n:
            raise T.ShapeError(f"layer {i} changed token count from {n} to {x.shape[1]}")
    x = T.layernorm(x, reg["norm.weight"], reg["norm.bias"])
    cls = T.slice_rows(x, 0, 1).reshape(x.shape[0], cfg.dim)
    return cls @ reg["head.weight"] + reg["head.bias"]


def freeze_backbone(reg: ParamRegistry, mode: str = "frozen"):
    """Set trainability of backbone tensors.

    mode 'full' leaves everything trainable, 'bitfit' keeps backbone biases trainable,
    'frozen' freezes the whole backbone. The head is always trainable.
    """
    if mode not in ("frozen", "full", "bitfit"):
        raise ValueError(f"unknown freeze mode {mode!r}")
    for name in list(reg):
        if not is_backbone(name):
            continue
        if mode == "full":
            reg.set_frozen(name, False)
        elif mode == "bitfit":
            reg.set_frozen(name, not is_bias(name))
        else:
            reg.set_frozen(name, True)
    for name in reg:
        if name.startswith(HEAD_PREFIX):
            reg.set_frozen(name, False)


@dataclass
class ViT:
    """A backbone plus (optionally) attached adaptation modules."""

    cfg: ViTConfig
    registry: ParamRegistry
    petl_spec: object = None
    adaptation: Adaptation = field(default=NO_ADAPTATION)

    def __call__(self, images) -> Tensor:
        return vit_forward(images, self.cfg, self.registry, self.adaptation)

    @property
    def dtype(self):
        return self.registry["patch_embed.weight"].dtype

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                x = Tensor(np.asarray(images[i:i + batch_size], dtype=self.dtype))
                out.append(self(x).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def build_vit(cfg: ViTConfig, seed: int = 0, dtype=np.float32, abstract: bool = False) -> ViT:
    return ViT(cfg, init_vit_params(cfg, seed, dtype, abstract))
