"""Trainable-parameter accounting against closed-form budgets."""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

from .petl import PETLSpec
from .vit import HEAD_PREFIX, PETL_PREFIX, ParamRegistry, ViTConfig, is_backbone


class UnsupportedMethod(ValueError):
    pass


class BudgetMismatch(AssertionError):
    def __init__(self, message: str, offending: list[str]):
        super().__init__(message)
        self.offending = offending


@dataclass(frozen=True)
class BudgetReport:
    method: str
    backbone_trainable: int
    petl: int
    head: int
    total: int
    predicted: int
    match: bool

    def csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow([f.name for f in fields(self)])
        w.writerow(astuple(self))
        return buf.getvalue()


def _size(shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def count_trainable(reg: ParamRegistry, include_head: bool = True) -> int:
    total = 0
    for name, p in reg.items():
        if p.frozen or (not include_head and name.startswith(HEAD_PREFIX)):
            continue
        total += _size(p.tensor.shape)
    return total


def convpass_module_count(d: int, h: int, kernel: int = 3) -> int:
    """(2h+1)d + k^2 h^2 + 2h: two 1x1 convs with biases around a k x k h->h conv."""
    return (2 * h + 1) * d + kernel * kernel * h * h + 2 * h


def predict_count(spec: PETLSpec, cfg: ViTConfig) -> int:
    """Closed-form count of backbone-side trainable parameters (head excluded)."""
    m, d, L, h = spec.method, cfg.dim, cfg.depth, spec.h
    if m in ("none", "linear"):
        return 0
    if m == "full":
        raise UnsupportedMethod("full finetuning has no closed-form budget")
    if m == "bitfit":
        # per layer: q,k,v,proj biases, fc1 (D), fc2, two LN biases; plus patch-embed and final-LN biases
        return L * (7 * d + cfg.mlp_dim) + 2 * d
    if m in ("adapter", "adaptformer"):
        return L * (2 * d * h + h + d)
    if m == "lora":
        return 2 * 2 * d * spec.r * L
    if m == "vpt":
        return spec.l * L * d
    if m == "convpass":
        return L * (convpass_module_count(d, h, spec.kernel_attn) + convpass_module_count(d, h, spec.kernel_mlp))
    if m in ("convpass_attn", "seq_convpass_attn"):
        return L * convpass_module_count(d, h, spec.kernel_attn)
    if m in ("convpass_mlp", "seq_convpass_mlp"):
        return L * convpass_module_count(d, h, spec.kernel_mlp)
    raise UnsupportedMethod(f"no closed form for method {m!r}")


def budget_report(reg: ParamRegistry, spec: PETLSpec, cfg: ViTConfig) -> BudgetReport:
    backbone = petl = head = 0
    for name, p in reg.items():
        if p.frozen:
            continue
        n = _size(p.tensor.shape)
        if name.startswith(HEAD_PREFIX):
            head += n
        elif name.startswith(PETL_PREFIX):
            petl += n
        else:
            backbone += n
    try:
        predicted = predict_count(spec, cfg)
    except UnsupportedMethod:
        predicted = -1
    counted = count_trainable(reg, include_head=False)
    return BudgetReport(spec.method, backbone, petl, head, backbone + petl + head, predicted, counted == predicted)


def assert_budget(reg: ParamRegistry, spec: PETLSpec, cfg: ViTConfig) -> BudgetReport:
    """Raise :class:`BudgetMismatch` (naming offending tensors) unless counted == predicted."""
    predicted = predict_count(spec, cfg)
    report = budget_report(reg, spec, cfg)
    if not report.match:
        if spec.method == "bitfit":
            offending = [n for n, p in reg.items() if not p.frozen and is_backbone(n) and not n.endswith(".bias")]
        else:
            offending = [n for n, p in reg.items() if not p.frozen and is_backbone(n)]
        raise BudgetMismatch(
            f"{spec.method}: counted {count_trainable(reg, include_head=False)} trainable parameters, "
            f"predicted {predicted}; unexpected trainable tensors: {', '.join(offending) or '(none)'}",
            offending)
    return report
