"""AdamW + warmup/cosine schedule, the epoch loop, and the pretrain -> finetune transfer experiment."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .accounting import UnsupportedMethod, count_trainable, predict_count
from .data import Dataset, Split, ToyTaskSpec, make_toy_dataset
from .petl import SCALED_METHODS, PETLSpec, attach_petl
from .vit import ViT, ViTConfig, build_vit, freeze_backbone, reset_head

log = logging.getLogger(__name__)

S_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


class DivergenceError(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    warmup_epochs: int = 10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    s_grid: tuple = S_GRID

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if min(self.lr, self.weight_decay, self.epochs, self.warmup_epochs) < 0:
            raise ValueError("rates and epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay = total_steps - warmup_steps
    if decay <= 0:
        return base_lr
    progress = (step - warmup_steps) / decay
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over the trainable tensors of a registry."""

    def __init__(self, registry, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.registry = registry
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.registry.trainable():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
            dt = p.data.dtype.type
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            self.m[name] = m = dt(self.b1) * m + dt(1 - self.b1) * g
            self.v[name] = v = dt(self.b2) * v + dt(1 - self.b2) * g * g
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(self.eps))
            p.data = p.data * dt(1.0 - lr * self.weight_decay) - dt(lr) * update


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_acc: float
    lr: float


@dataclass
class MetricsLog:
    rows: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc", "lr"])
        for r in self.rows:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_acc), repr(r.lr)])
        return buf.getvalue()


def evaluate(model: ViT, split: Split, batch_size: int = 256) -> float:
    if len(split) == 0:
        return float("nan")
    pred = model.predict(split.images, batch_size)
    return float((pred == split.labels).mean())


def train(model: ViT, data: Dataset, cfg: TrainConfig) -> MetricsLog:
    """Epoch loop with seeded shuffling; restores the best-validation trainable state at the end."""
    n = len(data.train)
    if n == 0:
        raise ValueError("empty training set")
    metrics = MetricsLog()
    if cfg.epochs == 0:
        return metrics
    reg = model.registry
    dtype = model.dtype
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_epochs * steps_per_epoch
    opt = AdamW(reg, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    trainable = [name for name, _ in reg.trainable()]
    best_state: Optional[dict] = None
    step = 0
    lr = 0.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            x = T.Tensor(data.train.images[idx].astype(dtype, copy=False))
            reg.zero_grad()
            loss = T.cross_entropy(model(x), data.train.labels[idx])
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"loss became {lv} at epoch {epoch}")
            loss.backward()
            lr = lr_at(step, total, warmup, cfg.lr)
            opt.step(lr)
            losses.append(lv * len(idx))
            step += 1
        val_acc = evaluate(model, data.val) if len(data.val) else float("nan")
        metrics.rows.append(EpochMetrics(epoch, float(np.sum(losses) / n), val_acc, lr))
        # ties keep the earlier epoch; without a val split the last epoch wins
        if not math.isfinite(val_acc) or best_state is None or val_acc > metrics.best_val:
            metrics.best_val, metrics.best_epoch = val_acc, epoch
            best_state = {k: reg[k].data.copy() for k in trainable}
    reg.zero_grad()
    reg.load_state(best_state)
    return metrics


# ---------------------------------------------------------------------------
# transfer experiment


@dataclass
class TransferRow:
    method: str
    s: float
    kernel_attn: int
    kernel_mlp: int
    val_acc: float
    test_acc: float
    trainable: int
    predicted: int


@dataclass
class TransferResult:
    seed: int
    source_acc: float
    rows: list[TransferRow]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["seed", "source_acc"] + [f.name for f in dataclasses.fields(TransferRow)])
        for r in self.rows:
            w.writerow([self.seed, repr(self.source_acc)] + [repr(v) if isinstance(v, float) else v
                                                             for v in dataclasses.astuple(r)])
        return buf.getvalue()


def pretrain(cfg: ViTConfig, source: Dataset, train_cfg: TrainConfig, dtype=np.float32) -> tuple[ViT, MetricsLog]:
    model = build_vit(dataclasses.replace(cfg, num_classes=source.num_classes), seed=train_cfg.seed, dtype=dtype)
    freeze_backbone(model.registry, "full")
    metrics = train(model, source, train_cfg)
    return model, metrics


def prepare_finetune(pretrained: ViT, spec: PETLSpec, num_classes: int, seed: int) -> ViT:
    """Copy the backbone, put a fresh head on it and attach ``spec``."""
    reg = pretrained.registry.copy()
    cfg = dataclasses.replace(pretrained.cfg, num_classes=num_classes)
    reset_head(reg, num_classes, seed)
    model = ViT(cfg, reg)
    return attach_petl(model, spec, seed=seed + 1)


def finetune_with_sweep(pretrained: ViT, spec: PETLSpec, target: Dataset,
                        train_cfg: TrainConfig) -> tuple[ViT, TransferRow, list[TransferRow]]:
    """Finetune once per s in the grid (for s-dependent methods); keep the best on validation."""
    grid = train_cfg.s_grid if spec.method in SCALED_METHODS else (spec.s,)
    best = None
    rows = []
    for s in grid:
        model = prepare_finetune(pretrained, spec.with_(s=s), target.num_classes, train_cfg.seed)
        metrics = train(model, target, train_cfg)
        try:
            predicted = predict_count(model.petl_spec, model.cfg)
        except UnsupportedMethod:
            predicted = -1
        row = TransferRow(spec.method, float(s), spec.kernel_attn, spec.kernel_mlp,
                          evaluate(model, target.val), evaluate(model, target.test),
                          count_trainable(model.registry, include_head=False), predicted)
        log.info("%s s=%g val=%.4f test=%.4f (best epoch %d)", spec.method, s, row.val_acc, row.test_acc,
                 metrics.best_epoch)
        rows.append(row)
        if best is None or row.val_acc > best[1].val_acc:
            best = (model, row)
    return best[0], best[1], rows


def transfer_experiment(vit_cfg: ViTConfig, source_spec: ToyTaskSpec, target_spec: ToyTaskSpec,
                        petl_specs: Sequence[PETLSpec], pretrain_cfg: TrainConfig,
                        finetune_cfg: TrainConfig, dtype=np.float32) -> TransferResult:
    if source_spec.signature_seed == target_spec.signature_seed and source_spec.kind == target_spec.kind == \
            "synthetic-textures":
        raise ValueError("source and target tasks share class signatures")
    source = make_toy_dataset(source_spec)
    target = make_toy_dataset(target_spec)
    model, _ = pretrain(vit_cfg, source, pretrain_cfg, dtype)
    source_acc = evaluate(model, source.test)
    log.info("pretrained: source test acc %.4f", source_acc)
    rows = []
    for spec in petl_specs:
        _, best, _ = finetune_with_sweep(model, spec, target, finetune_cfg)
        rows.append(best)
    return TransferResult(finetune_cfg.seed, source_acc, rows)
