"""Adaptation modules and the logic that wires them into a :class:`~petlvit.vit.ViT`.

Methods: Convpass (parallel/sequential, attn/mlp sites, 1x1 or 3x3 middle conv),
Adapter, AdaptFormer, LoRA (query/value), deep VPT prompts and BitFit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vit import (PETL_PREFIX, Adaptation, ParamRegistry, ViT, ViTConfig, conv_fan, freeze_backbone,
                  init_array)

METHODS = (
    "none", "full", "linear", "bitfit", "adapter", "adaptformer", "lora", "vpt",
    "convpass", "convpass_attn", "convpass_mlp", "seq_convpass_attn", "seq_convpass_mlp",
)
CONVPASS_METHODS = ("convpass", "convpass_attn", "convpass_mlp", "seq_convpass_attn", "seq_convpass_mlp")
# methods whose output depends on the scale s
SCALED_METHODS = ("convpass", "convpass_attn", "convpass_mlp", "adaptformer", "lora")
ACTIVATIONS = ("gelu", "relu", "identity")


class PETLError(ValueError):
    pass


class ConvpassGridError(PETLError):
    pass


@dataclass(frozen=True)
class PETLSpec:
    method: str = "none"
    h: int = 8
    r: int = 8
    l: int = 10  # noqa: E741
    s: float = 1.0
    kernel_attn: int = 3
    kernel_mlp: int = 3
    activation: str = "gelu"

    def __post_init__(self):
        if self.method not in METHODS:
            raise PETLError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        for name in ("h", "r", "l"):
            if getattr(self, name) < 1:
                raise PETLError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not math.isfinite(self.s):
            raise PETLError(f"s must be finite, got {self.s}")
        for name in ("kernel_attn", "kernel_mlp"):
            if getattr(self, name) not in (1, 3):
                raise PETLError(f"{name} must be 1 or 3, got {getattr(self, name)}")
        if self.activation not in ACTIVATIONS:
            raise PETLError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def with_(self, **kw) -> "PETLSpec":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class BypassAttachment:
    layer: int
    site: str  # "attn" | "mlp" | "layer" (vpt)
    mode: str  # "parallel" | "sequential" | "projection" | "prompt"
    kind: str  # "convpass" | "adapter" | "adaptformer" | "lora" | "vpt"
    kernel: int = 0

    @property
    def prefix(self) -> str:
        if self.kind == "vpt":
            return f"{PETL_PREFIX}blocks.{self.layer}.vpt."
        tag = "seq_convpass" if (self.kind == "convpass" and self.mode == "sequential") else self.kind
        return f"{PETL_PREFIX}blocks.{self.layer}.{self.site}.{tag}."


def plan_attachments(spec: PETLSpec, cfg: ViTConfig) -> list[BypassAttachment]:
    m = spec.method
    out = []
    for i in range(cfg.depth):
        if m in ("convpass", "convpass_attn"):
            out.append(BypassAttachment(i, "attn", "parallel", "convpass", spec.kernel_attn))
        if m in ("convpass", "convpass_mlp"):
            out.append(BypassAttachment(i, "mlp", "parallel", "convpass", spec.kernel_mlp))
        if m == "seq_convpass_attn":
            out.append(BypassAttachment(i, "attn", "sequential", "convpass", spec.kernel_attn))
        if m == "seq_convpass_mlp":
            out.append(BypassAttachment(i, "mlp", "sequential", "convpass", spec.kernel_mlp))
        if m == "adapter":
            out.append(BypassAttachment(i, "mlp", "sequential", "adapter"))
        if m == "adaptformer":
            out.append(BypassAttachment(i, "mlp", "parallel", "adaptformer"))
        if m == "lora":
            out.append(BypassAttachment(i, "attn", "projection", "lora"))
        if m == "vpt":
            out.append(BypassAttachment(i, "layer", "prompt", "vpt"))
    return out


# ---------------------------------------------------------------------------
# functional modules


def _act(x: Tensor, name: str) -> Tensor:
    if name == "gelu":
        return T.gelu(x)
    if name == "relu":
        return T.relu(x)
    return x


def bottleneck(x: Tensor, p: dict, activation: str = "gelu") -> Tensor:
    """phi(X W_down + b_down) W_up + b_up."""
    return _act(x @ p["down.weight"] + p["down.bias"], activation) @ p["up.weight"] + p["up.bias"]


def adapter_seq(x: Tensor, p: dict, activation: str = "gelu") -> Tensor:
    return x + bottleneck(x, p, activation)


def adaptformer_parallel(x: Tensor, h: Tensor, mlp_out: Tensor, p: dict, s: float,
                         activation: str = "gelu") -> Tensor:
    """X + MLP(LN X) + s * bottleneck(LN X); ``h`` is the normalised input both branches read."""
    y = x + mlp_out
    if s == 0:
        return y
    return y + T.scale(bottleneck(h, p, activation), s)


def lora_project(h: Tensor, w: Tensor, b: Tensor, a: Tensor, bmat: Tensor, s: float) -> Tensor:
    """h W + b + s (h A) B."""
    d, r = a.shape
    if r >= d:
        raise PETLError(f"LoRA rank {r} must be smaller than width {d}")
    base = h @ w + b
    if s == 0:
        return base
    return base + T.scale((h @ a) @ bmat, s)


def vpt_extend(x: Tensor, prompts: Tensor) -> Tensor:
    bsz, _, d = x.shape
    l = prompts.shape[0]  # noqa: E741
    return T.concat_rows(x, T.expand(prompts.reshape(1, l, d), (bsz, l, d)))


def vpt_trim(x: Tensor, n: int) -> Tensor:
    if x.shape[1] < n:
        raise T.ShapeError(f"vpt_trim: cannot trim {x.shape} to {n} tokens")
    return T.slice_rows(x, 0, n)


def _conv_stack(z: Tensor, p: dict, activation: str) -> Tensor:
    z = _act(T.conv2d(z, p["conv1.weight"], p["conv1.bias"]), activation)
    z = _act(T.conv2d(z, p["conv2.weight"], p["conv2.bias"]), activation)
    return T.conv2d(z, p["conv3.weight"], p["conv3.bias"])


def convpass_module(x: Tensor, p: dict, activation: str = "gelu") -> Tensor:
    """Convolutional bypass over the token grid; [cls] goes through the same convs as a 1x1 image."""
    bsz, n, d = x.shape
    side = math.isqrt(n - 1) if n > 1 else 0
    if side * side != n - 1 or side == 0:
        raise ConvpassGridError(f"convpass needs a square patch grid, but N-1 = {n - 1} is not a perfect square")
    cls = T.slice_rows(x, 0, 1).reshape(bsz, d, 1, 1)
    grid = T.transpose(T.slice_rows(x, 1, n), (0, 2, 1)).reshape(bsz, d, side, side)
    cls_out = _conv_stack(cls, p, activation).reshape(bsz, 1, d)
    grid_out = T.transpose(_conv_stack(grid, p, activation).reshape(bsz, d, n - 1), (0, 2, 1))
    return T.concat_rows(cls_out, grid_out)


# ---------------------------------------------------------------------------
# parameters


def init_petl_params(spec: PETLSpec, cfg: ViTConfig, reg: ParamRegistry, seed: int = 0,
                     abstract: bool = False) -> list[BypassAttachment]:
    """Register (trainable) tensors for every planned attachment; weights Xavier, biases zero, LoRA B zero."""
    rng = np.random.default_rng(seed)
    dtype = reg["patch_embed.weight"].dtype
    d, h, r = cfg.dim, spec.h, spec.r
    plan = plan_attachments(spec, cfg)

    def add(name, shape, scheme, fan=None):
        reg.add(name, init_array(scheme, shape, rng, dtype, abstract, fan), scheme)

    for att in plan:
        pre = att.prefix
        if att.kind == "convpass":
            k = att.kernel
            for conv, shape in (("conv1", (h, d, 1, 1)), ("conv2", (h, h, k, k)), ("conv3", (d, h, 1, 1))):
                add(pre + conv + ".weight", shape, "xavier_uniform", conv_fan(shape))
                add(pre + conv + ".bias", (shape[0],), "zeros")
        elif att.kind in ("adapter", "adaptformer"):
            add(pre + "down.weight", (d, h), "xavier_uniform")
            add(pre + "down.bias", (h,), "zeros")
            add(pre + "up.weight", (h, d), "xavier_uniform")
            add(pre + "up.bias", (d,), "zeros")
        elif att.kind == "lora":
            if r >= d:
                raise PETLError(f"LoRA rank {r} must be smaller than width {d}")
            for proj in ("q", "v"):
                add(pre + f"{proj}.A", (d, r), "xavier_uniform")
                add(pre + f"{proj}.B", (r, d), "zeros")
        elif att.kind == "vpt":
            add(pre + "prompts", (spec.l, d), "xavier_uniform")
    return plan


class PETLAdaptation(Adaptation):
    def __init__(self, spec: PETLSpec, reg: ParamRegistry, plan: list[BypassAttachment]):
        self.spec = spec
        self.reg = reg
        self.by_site: dict[tuple[int, str, str], BypassAttachment] = {}
        for att in plan:
            key = (att.layer, att.site, att.mode)
            if key in self.by_site:
                raise PETLError(f"duplicate attachment at {key}")
            self.by_site[key] = att

    def _params(self, att: BypassAttachment) -> dict:
        return self.reg.view(att.prefix)

    def extend(self, layer, x):
        att = self.by_site.get((layer, "layer", "prompt"))
        if att is None:
            return x
        return vpt_extend(x, self.reg[att.prefix + "prompts"])

    def trim(self, layer, x, n):
        if (layer, "layer", "prompt") not in self.by_site:
            return x
        return vpt_trim(x, n)

    def project(self, layer, name, h, w, b):
        att = self.by_site.get((layer, "attn", "projection"))
        if att is None or name not in ("q", "v"):
            return h @ w + b
        p = self._params(att)
        return lora_project(h, w, b, p[f"{name}.A"], p[f"{name}.B"], self.spec.s)

    def parallel(self, layer, site, h):
        att = self.by_site.get((layer, site, "parallel"))
        if att is None or self.spec.s == 0:
            return None
        p = self._params(att)
        if att.kind == "convpass":
            out = convpass_module(h, p, self.spec.activation)
        else:
            out = bottleneck(h, p, self.spec.activation)
        return T.scale(out, self.spec.s)

    def after(self, layer, site, y):
        att = self.by_site.get((layer, site, "sequential"))
        if att is None:
            return y
        p = self._params(att)
        if att.kind == "adapter":
            return adapter_seq(y, p, self.spec.activation)
        # sequential convpass: an extra residual unit with a parameter-free LN
        return y + convpass_module(T.layernorm(y, None, None), p, self.spec.activation)


def freeze_mode(method: str) -> str:
    if method == "full":
        return "full"
    if method == "bitfit":
        return "bitfit"
    return "frozen"


def attach_petl(model: ViT, spec: PETLSpec, seed: int = 0, abstract: bool = False) -> ViT:
    """Freeze per method, register adaptation tensors and install forward hooks (mutates ``model``)."""
    if model.petl_spec is not None and getattr(model.petl_spec, "method", "none") not in ("none",):
        raise PETLError(f"model already has {model.petl_spec.method!r} attached")
    if spec.method in CONVPASS_METHODS and model.cfg.grid_size < 1:
        raise ConvpassGridError("convpass needs at least one patch")
    freeze_backbone(model.registry, freeze_mode(spec.method))
    plan = init_petl_params(spec, model.cfg, model.registry, seed, abstract)
    model.petl_spec = spec
    model.adaptation = PETLAdaptation(spec, model.registry, plan) if plan else Adaptation()
    return model


def install_hooks(model: ViT, spec: PETLSpec) -> ViT:
    """Re-create hooks for a registry that already holds the adaptation tensors (checkpoint load)."""
    plan = plan_attachments(spec, model.cfg)
    for att in plan:
        if not any(n.startswith(att.prefix) for n in model.registry):
            raise PETLError(f"registry lacks tensors for attachment {att.prefix}")
    model.petl_spec = spec
    model.adaptation = PETLAdaptation(spec, model.registry, plan) if plan else Adaptation()
    return model


def set_scale(model: ViT, s: float):
    """Change s in place (the hooks read it on every forward)."""
    spec = model.petl_spec.with_(s=s)
    model.petl_spec = spec
    if isinstance(model.adaptation, PETLAdaptation):
        model.adaptation.spec = spec
