"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .petl import PETLSpec, attach_petl, convpass_module
from .vit import ViTConfig, build_vit, mhsa_block, mlp_block

STEP = 1e-4
RTOL = 1e-4
ATOL = 1e-6


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err <= RTOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    """|a-n| / max(|a|, |n|, atol/rtol): <= rtol exactly when rel <= rtol or abs <= atol near zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol / rtol)
    return np.abs(analytic - numeric) / denom


def check_function(name: str, fn: Callable[..., T.Tensor], inputs: Sequence[np.ndarray],
                   rng: np.random.Generator, max_entries: int = 0, step: float = STEP) -> GradCheckResult:
    """Compare backprop of ``sum(fn(*inputs) * R)`` (R random) with central differences.

    ``max_entries`` > 0 limits the number of probed entries per input.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weights = rng.standard_normal(out.shape)
    loss = T.sum(T.mul(out, T.Tensor(weights)))
    loss.backward()

    def value(arrs):
        with T.no_grad():
            return float((fn(*[T.Tensor(a) for a in arrs]).data * weights).sum())

    worst, count = 0.0, 0
    for i, x in enumerate(inputs):
        flat = np.arange(x.size)
        if max_entries and x.size > max_entries:
            flat = rng.choice(x.size, size=max_entries, replace=False)
        analytic = tensors[i].grad.reshape(-1)
        for j in flat:
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            numeric = (value(plus) - value(minus)) / (2 * step)
            worst = max(worst, float(rel_error(np.array(analytic[j]), np.array(numeric))))
            count += 1
    return GradCheckResult(name, worst, count)


def primitive_checks(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    labels = np.array([1, 0, 2])
    cases = [
        ("add", lambda a, b: T.add(a, b), [r((3, 4)), r((4,))]),
        ("sub", lambda a, b: T.sub(a, b), [r((3, 4)), r((3, 1))]),
        ("mul", lambda a, b: T.mul(a, b), [r((3, 4)), r((3, 4))]),
        ("scale", lambda a: T.scale(a, 2.5), [r((3, 4))]),
        ("matmul", lambda a, b: T.matmul(a, b), [r((2, 3, 4)), r((4, 5))]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [r((2, 3, 4)), r((2, 4, 2))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [r((3, 5))]),
        ("gelu", T.gelu, [r((4, 5))]),
        ("layernorm", lambda x, g, b: T.layernorm(x, g, b), [r((2, 3, 6)), r((6,)), r((6,))]),
        ("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b), [r((2, 3, 4, 4)), r((2, 3, 1, 1)), r((2,))]),
        ("conv2d_3x3", lambda x, w, b: T.conv2d(x, w, b), [r((1, 2, 4, 4)), r((3, 2, 3, 3)), r((3,))]),
        ("reshape", lambda a: T.reshape(a, (4, 3)), [r((3, 4))]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        ("expand", lambda a: T.expand(a, (3, 2, 4)), [r((1, 2, 4))]),
        ("concat_rows", T.concat_rows, [r((2, 3, 4)), r((2, 2, 4))]),
        ("slice_rows", lambda a: T.slice_rows(a, 1, 3), [r((2, 4, 3))]),
        ("sum", lambda a: T.sum(a, axis=1), [r((3, 4))]),
        ("mean", lambda a: T.mean(a, axis=0), [r((3, 4))]),
        ("cross_entropy", lambda z: T.cross_entropy(z, labels), [r((3, 4))]),
    ]
    return [check_function(name, fn, inputs, rng) for name, fn, inputs in cases]


def block_checks(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    d, heads = 8, 2
    names = ["q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "proj.weight", "proj.bias"]
    shapes = [(d, d), (d,)] * 4

    def mhsa(x, *ps):
        return mhsa_block(x, dict(zip(names, ps)), heads)

    def mlp(x, w1, b1, w2, b2):
        return mlp_block(x, {"fc1.weight": w1, "fc1.bias": b1, "fc2.weight": w2, "fc2.bias": b2})

    def convpass(x, w1, b1, w2, b2, w3, b3):
        keys = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias"]
        return convpass_module(x, dict(zip(keys, (w1, b1, w2, b2, w3, b3))))

    h = 3
    return [
        check_function("mhsa_block", mhsa, [r((1, 4, d))] + [r(s) * 0.5 for s in shapes], rng),
        check_function("mlp_block", mlp, [r((2, 3, d)), r((d, 16)), r((16,)), r((16, d)), r((d,))], rng),
        check_function("convpass_module", convpass,
                       [r((1, 5, d)), r((h, d, 1, 1)), r((h,)), r((h, h, 3, 3)), r((h,)), r((d, h, 1, 1)), r((d,))],
                       rng),
    ]


TINY = ViTConfig(image_size=16, patch_size=8, in_channels=2, dim=8, depth=2, num_heads=2, mlp_dim=16, num_classes=3)


def model_check(method: str, cfg: ViTConfig = TINY, seed: int = 0, max_entries: int = 4,
                step: float = STEP) -> GradCheckResult:
    """Finite-difference check over every parameter tensor of a full model graph (float64)."""
    rng = np.random.default_rng(seed)
    model = build_vit(cfg, seed=seed, dtype=np.float64)
    attach_petl(model, PETLSpec(method=method, h=3, r=2, l=2), seed=seed + 1)
    reg = model.registry
    for name in reg:
        if name.endswith(".B"):  # LoRA B starts at zero; give it generic values
            reg[name].data = rng.standard_normal(reg[name].shape) * 0.1
        elif name in ("cls_token", "pos_embed"):
            # at init the cls row has variance ~4e-4, where LN curvature swamps an h=1e-4 difference
            reg[name].data = rng.standard_normal(reg[name].shape)
        reg.set_frozen(name, False)
    images = rng.standard_normal((2, cfg.in_channels, cfg.image_size, cfg.image_size))
    labels = rng.integers(0, cfg.num_classes, size=2)

    def loss_value() -> float:
        with T.no_grad():
            return T.cross_entropy(model(T.Tensor(images)), labels).item()

    reg.zero_grad()
    T.cross_entropy(model(T.Tensor(images)), labels).backward()
    worst, count = 0.0, 0
    for name, p in reg.items():
        t = p.tensor
        analytic = t.grad.reshape(-1).copy()
        idx = rng.choice(t.data.size, size=min(max_entries, t.data.size), replace=False)
        for j in idx:
            orig = t.data.reshape(-1)[j]
            data = t.data.copy()
            data.reshape(-1)[j] = orig + step
            t.data = data
            fp = loss_value()
            data = data.copy()
            data.reshape(-1)[j] = orig - step
            t.data = data
            fm = loss_value()
            data = data.copy()
            data.reshape(-1)[j] = orig
            t.data = data
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, float(rel_error(np.array(analytic[j]), np.array(numeric))))
            count += 1
    return GradCheckResult(f"model[{method}]", worst, count)


def run_all(seed: int = 0, cfg: ViTConfig = TINY, methods: Sequence[str] = ("full", "convpass", "vpt")
            ) -> list[GradCheckResult]:
    results = primitive_checks(seed) + block_checks(seed)
    results += [model_check(m, cfg, seed) for m in methods]
    return results


def table(results: Sequence[GradCheckResult]) -> str:
    lines = ["op,max_rel_err,checked,status"]
    for r in results:
        lines.append(f"{r.name},{r.max_rel_err:.3e},{r.checked},{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
