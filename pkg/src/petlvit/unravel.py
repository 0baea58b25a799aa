"""Unraveled view of stacked residual units.

A stack of residual units ``x <- x + sum_b f_b(x)`` expands into a sum over paths,
one branch choice (identity or one of the unit's branches) per unit. The expansion
is an identity only when every ``f_b`` is linear, so :func:`path_sum_forward`
works on linearised graphs (see :func:`linearize_model`).
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .petl import PETLAdaptation, PETLSpec, plan_attachments
from .vit import ViT, attention_weights, patch_embed, residual_unit

DEFAULT_PATH_CAP = 3 ** 8
TRAINABLE_KINDS = {"adapter", "adaptformer", "convpass", "lora", "vpt"}
FROZEN_KINDS = {"mhsa", "mlp"}

LinearMap = Callable[[np.ndarray], np.ndarray]


class PathCapExceeded(RuntimeError):
    pass


class PathType(enum.Enum):
    TYPE_I = "I"
    TYPE_II = "II"
    TYPE_III = "III"


@dataclass(frozen=True)
class Branch:
    kind: str
    fn: Optional[LinearMap] = field(default=None, compare=False)

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS


@dataclass(frozen=True)
class Unit:
    kind: str
    branches: tuple[Branch, ...]

    @property
    def alphabet(self) -> tuple[str, ...]:
        return ("identity",) + tuple(b.kind for b in self.branches)


@dataclass(frozen=True)
class ResidualUnitGraph:
    units: tuple[Unit, ...]

    @property
    def path_count(self) -> int:
        return math.prod(len(u.alphabet) for u in self.units)

    def describe(self) -> str:
        return " -> ".join("+".join(u.alphabet[1:]) for u in self.units)


@dataclass(frozen=True)
class PathDescriptor:
    choices: tuple[int, ...]
    path_type: PathType

    def branches(self, graph: ResidualUnitGraph) -> list[Optional[Branch]]:
        return [None if c == 0 else u.branches[c - 1] for u, c in zip(graph.units, self.choices)]

    def labels(self, graph: ResidualUnitGraph) -> tuple[str, ...]:
        return tuple(u.alphabet[c] for u, c in zip(graph.units, self.choices))


def simple_unit(kind: str, fn: Optional[LinearMap] = None) -> Unit:
    return Unit(kind, (Branch(kind, fn),))


def graph_from_kinds(kinds: Sequence[str]) -> ResidualUnitGraph:
    """One single-branch unit per kind, e.g. ``["mhsa", "mlp", "adapter", "mhsa"]``."""
    for k in kinds:
        if k not in TRAINABLE_KINDS | FROZEN_KINDS:
            raise ValueError(f"unknown unit kind {k!r}")
    return ResidualUnitGraph(tuple(simple_unit(k) for k in kinds))


def graph_from_spec(spec: PETLSpec, depth: int) -> ResidualUnitGraph:
    """Residual-unit structure of a ViT of ``depth`` layers with ``spec`` attached."""
    from .vit import ViTConfig

    plan = plan_attachments(spec, ViTConfig(depth=depth))
    units = []
    for i in range(depth):
        for site, trunk in (("attn", "mhsa"), ("mlp", "mlp")):
            branches = [Branch(trunk)]
            for att in plan:
                if att.layer != i:
                    continue
                if att.mode in ("parallel", "projection") and att.site == site:
                    branches.append(Branch(att.kind))
                if att.mode == "prompt" and site == "attn":
                    branches.append(Branch("vpt"))
            units.append(Unit(trunk, tuple(branches)))
            for att in plan:
                if att.layer == i and att.site == site and att.mode == "sequential":
                    units.append(simple_unit(att.kind))
    return ResidualUnitGraph(tuple(units))


def classify_path(choices: Sequence[int], graph: ResidualUnitGraph) -> PathType:
    seen_trainable = False
    for unit, c in zip(graph.units, choices):
        if c == 0:
            continue
        b = unit.branches[c - 1]
        if b.trainable:
            seen_trainable = True
        elif b.kind == "mhsa" and seen_trainable:
            return PathType.TYPE_III
    return PathType.TYPE_II if seen_trainable else PathType.TYPE_I


def iter_paths(graph: ResidualUnitGraph, cap: int = DEFAULT_PATH_CAP) -> Iterator[PathDescriptor]:
    if graph.path_count > cap:
        raise PathCapExceeded(f"{graph.path_count} paths exceed the cap of {cap}")
    for choices in itertools.product(*(range(len(u.alphabet)) for u in graph.units)):
        yield PathDescriptor(choices, classify_path(choices, graph))


def enumerate_paths(graph: ResidualUnitGraph, cap: int = DEFAULT_PATH_CAP) -> list[PathDescriptor]:
    return list(iter_paths(graph, cap))


def census(graph: ResidualUnitGraph, cap: int = DEFAULT_PATH_CAP) -> dict[str, int]:
    counts = {"total": 0, "type_i": 0, "type_ii": 0, "type_iii": 0}
    for p in iter_paths(graph, cap):
        counts["total"] += 1
        counts["type_" + p.path_type.value.lower()] += 1
    return counts


def all_convolutional_paths(graph: ResidualUnitGraph, cap: int = DEFAULT_PATH_CAP) -> list[PathDescriptor]:
    """Paths whose chosen branches are all convpass (the ResNet-like CNN inside the model)."""
    out = []
    for p in iter_paths(graph, cap):
        chosen = [b for b in p.branches(graph) if b is not None]
        if chosen and all(b.kind == "convpass" for b in chosen):
            out.append(p)
    return out


# ---------------------------------------------------------------------------
# linear mode


def sequential_forward(x: np.ndarray, graph: ResidualUnitGraph) -> np.ndarray:
    for unit in graph.units:
        x = x + sum(_fn(b)(x) for b in unit.branches)
    return x


def _fn(b: Branch) -> LinearMap:
    if b.fn is None:
        raise ValueError(f"branch {b.kind!r} has no linear map")
    return b.fn


def path_sum_forward(x: np.ndarray, graph: ResidualUnitGraph, linear_mode: bool = True,
                     cap: int = DEFAULT_PATH_CAP) -> np.ndarray:
    """Sum over every path of the composed branch maps applied to ``x``."""
    if not linear_mode:
        raise NotImplementedError("the path expansion is only an identity for linear units; use linear_mode=True")
    total = np.zeros_like(x)
    for p in iter_paths(graph, cap):
        z = x
        for b in p.branches(graph):
            if b is not None:
                z = _fn(b)(z)
        total = total + z
    return total


def _attn_map(attn: np.ndarray, wv: np.ndarray, wo: np.ndarray) -> LinearMap:
    heads = attn.shape[0]
    dh = wv.shape[1] // heads

    def f(x):
        v = x @ wv
        out = np.concatenate([attn[i] @ v[:, i * dh:(i + 1) * dh] for i in range(heads)], axis=1)
        return out @ wo
    return f


def _conv_linear_map(p: dict, s: float) -> LinearMap:
    w1, w2, w3 = (p[f"conv{i}.weight"].data for i in (1, 2, 3))

    def f(x):
        n, d = x.shape
        side = math.isqrt(n - 1)
        cls = x[:1].T.reshape(1, d, 1, 1)
        grid = x[1:].T.reshape(1, d, side, side)
        outs = []
        for img in (cls, grid):
            y = T.Tensor(img)
            for w in (w1, w2, w3):
                y = T.conv2d(y, T.Tensor(w))
            outs.append(y.data.reshape(d, -1).T)
        return s * np.concatenate(outs, axis=0)
    return f


def linearize_model(model: ViT, image: np.ndarray) -> ResidualUnitGraph:
    """Replace every unit of ``model`` by a linear map: LN and activations become identities,
    biases are dropped and attention matrices are frozen to the ones seen on ``image``.
    """
    spec = model.petl_spec if isinstance(model.petl_spec, PETLSpec) else PETLSpec()
    if spec.method == "vpt":
        raise NotImplementedError("prompt tokens are not a linear branch")
    cfg, reg, ad = model.cfg, model.registry, model.adaptation
    structure = graph_from_spec(spec, cfg.depth)
    atts = ad.by_site if isinstance(ad, PETLAdaptation) else {}
    img = np.asarray(image, dtype=model.dtype)
    if img.ndim == 3:
        img = img[None]
    with T.no_grad():
        x = patch_embed(T.Tensor(img[:1]), cfg, reg)
        attn_mats = []
        for i in range(cfg.depth):
            h = T.layernorm(x, reg[f"blocks.{i}.norm1.weight"], reg[f"blocks.{i}.norm1.bias"])
            attn_mats.append(attention_weights(h, reg.view(f"blocks.{i}.attn."), cfg.num_heads,
                                               project=lambda n, hh, w, b: ad.project(i, n, hh, w, b))[0])
            x = residual_unit(x, i, "attn", cfg, reg, ad)
            x = residual_unit(x, i, "mlp", cfg, reg, ad)

    units = []
    it = iter(structure.units)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        for site in ("attn", "mlp"):
            unit = next(it)
            branches = []
            for b in unit.branches:
                if b.kind == "mhsa":
                    fn = _attn_map(attn_mats[i], reg[pre + "attn.v.weight"].data, reg[pre + "attn.proj.weight"].data)
                elif b.kind == "mlp":
                    w1, w2 = reg[pre + "mlp.fc1.weight"].data, reg[pre + "mlp.fc2.weight"].data
                    fn = (lambda w1, w2: lambda x: x @ w1 @ w2)(w1, w2)
                elif b.kind == "convpass":
                    fn = _conv_linear_map(reg.view(atts[(i, site, "parallel")].prefix), spec.s)
                elif b.kind == "adaptformer":
                    p = reg.view(atts[(i, site, "parallel")].prefix)
                    fn = (lambda a, c, s: lambda x: s * (x @ a @ c))(p["down.weight"].data, p["up.weight"].data, spec.s)
                elif b.kind == "lora":
                    p = reg.view(atts[(i, "attn", "projection")].prefix)
                    delta_v = spec.s * (p["v.A"].data @ p["v.B"].data)
                    fn = _attn_map(attn_mats[i], delta_v, reg[pre + "attn.proj.weight"].data)
                else:
                    raise NotImplementedError(f"no linearisation for branch {b.kind!r}")
                branches.append(Branch(b.kind, fn))
            units.append(Unit(unit.kind, tuple(branches)))
            seq = atts.get((i, site, "sequential"))
            if seq is not None:
                seq_unit = next(it)
                p = reg.view(seq.prefix)
                if seq.kind == "adapter":
                    fn = (lambda a, c: lambda x: x @ a @ c)(p["down.weight"].data, p["up.weight"].data)
                else:
                    fn = _conv_linear_map(p, 1.0)
                units.append(Unit(seq_unit.kind, (Branch(seq_unit.branches[0].kind, fn),)))
    return ResidualUnitGraph(tuple(units))


def random_linear_graph(rng: np.random.Generator, n_units: int, n_tokens: int, dim: int,
                        max_branches: int = 2) -> ResidualUnitGraph:
    """Random graph whose branch maps are X -> A X W (token mixing and channel mixing)."""
    kinds = sorted(TRAINABLE_KINDS | FROZEN_KINDS)
    units = []
    for _ in range(n_units):
        nb = int(rng.integers(1, max_branches + 1))
        branches = []
        for _ in range(nb):
            kind = kinds[int(rng.integers(len(kinds)))]
            a = rng.standard_normal((n_tokens, n_tokens)) / n_tokens
            w = rng.standard_normal((dim, dim)) / (2 * math.sqrt(dim))
            branches.append(Branch(kind, (lambda a, w: lambda x: a @ x @ w)(a, w)))
        units.append(Unit(branches[0].kind, tuple(branches)))
    return ResidualUnitGraph(tuple(units))
