"""Flat ``key=value`` run configuration.

Whitespace separates pairs, so several may share a line; ``#`` starts a comment.
Every key has a default, so an empty file is a complete configuration.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import DatasetError, ToyTaskSpec
from .petl import PETLError, PETLSpec
from .train import S_GRID, TrainConfig
from .unravel import FROZEN_KINDS, TRAINABLE_KINDS
from .vit import ViTConfig

PRECISIONS = {"f32": np.float32, "f64": np.float64}
UNIT_KINDS = TRAINABLE_KINDS | FROZEN_KINDS
_FIELD_ALIASES = {"dim": "d", "depth": "L", "num_heads": "N_h", "mlp_dim": "D", "channels": "in_channels"}


class ConfigError(ValueError):
    def __init__(self, message: str, keys: tuple[str, ...] = ()):
        super().__init__(message)
        self.keys = keys


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.split(",") if x)


def _words(v: str) -> tuple[str, ...]:
    return tuple(x for x in v.split(",") if x)


@dataclass(frozen=True)
class Key:
    default: object
    parse: Callable[[str], object]
    doc: str


KEYS: dict[str, Key] = {
    # backbone
    "image_size": Key(32, int, "input side length in pixels"),
    "patch_size": Key(8, int, "patch side length"),
    "in_channels": Key(3, int, "image channels"),
    "d": Key(16, int, "embedding width"),
    "L": Key(2, int, "number of transformer layers"),
    "N_h": Key(2, int, "attention heads"),
    "D": Key(32, int, "MLP hidden width"),
    # adaptation
    "method": Key("none", str, "adaptation method"),
    "h": Key(8, int, "bottleneck width"),
    "r": Key(8, int, "LoRA rank"),
    "l": Key(10, int, "prompt tokens per layer"),
    "s": Key(1.0, float, "bypass scale"),
    "kernel_attn": Key(3, int, "Convpass kernel next to attention (1 or 3)"),
    "kernel_mlp": Key(3, int, "Convpass kernel next to the MLP (1 or 3)"),
    "activation": Key("gelu", str, "bypass activation"),
    # finetuning
    "batch_size": Key(64, int, "minibatch size (clamped to the train split)"),
    "lr": Key(1e-3, float, "peak learning rate"),
    "weight_decay": Key(1e-4, float, "decoupled weight decay"),
    "epochs": Key(100, int, "finetuning epochs"),
    "warmup_epochs": Key(10, int, "linear warmup epochs"),
    "s_grid": Key(S_GRID, _floats, "comma-separated s values swept by `sweep`"),
    # pretraining
    "pretrain_batch_size": Key(64, int, "pretraining minibatch size"),
    "pretrain_lr": Key(1e-3, float, "pretraining peak learning rate"),
    "pretrain_weight_decay": Key(1e-4, float, "pretraining weight decay"),
    "pretrain_epochs": Key(30, int, "pretraining epochs"),
    "pretrain_warmup_epochs": Key(3, int, "pretraining warmup epochs"),
    # data
    "task": Key("synthetic-textures", str, "synthetic-textures or idx-files"),
    "noise": Key(0.5, float, "pixel noise standard deviation"),
    "phase_jitter": Key(0.0, float, "per-image grating phase jitter (fraction of pi)"),
    "max_frequency": Key(6.0, float, "highest grating frequency in cycles per image"),
    "source_classes": Key(8, int, "source task classes"),
    "source_shots": Key(100, int, "source training images per class"),
    "source_val_per_class": Key(20, int, "source validation images per class"),
    "source_signature": Key(1, int, "seed of the source class signatures"),
    "target_classes": Key(8, int, "target task classes"),
    "target_shots": Key(16, int, "target training images per class"),
    "target_signature": Key(2, int, "seed of the target class signatures"),
    "val_per_class": Key(4, int, "target validation images per class"),
    "test_per_class": Key(50, int, "test images per class (both tasks)"),
    "idx_images": Key("", str, "IDX image file (task=idx-files)"),
    "idx_labels": Key("", str, "IDX label file (task=idx-files)"),
    # run
    "seed": Key(0, int, "master seed"),
    "precision": Key("f32", str, "f32 or f64"),
    "unravel_units": Key((), _words, "comma-separated unit kinds for `unravel`; empty uses the model layout"),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def dtype(self):
        return PRECISIONS[self["precision"]]

    def vit(self, num_classes: int) -> ViTConfig:
        v = self.values
        return ViTConfig(image_size=v["image_size"], patch_size=v["patch_size"], in_channels=v["in_channels"],
                         dim=v["d"], depth=v["L"], num_heads=v["N_h"], mlp_dim=v["D"], num_classes=num_classes)

    @property
    def petl(self) -> PETLSpec:
        v = self.values
        return PETLSpec(method=v["method"], h=v["h"], r=v["r"], l=v["l"], s=v["s"],
                        kernel_attn=v["kernel_attn"], kernel_mlp=v["kernel_mlp"], activation=v["activation"])

    def train_cfg(self, seed: Optional[int] = None) -> TrainConfig:
        v = self.values
        return TrainConfig(batch_size=v["batch_size"], lr=v["lr"], weight_decay=v["weight_decay"],
                           epochs=v["epochs"], warmup_epochs=v["warmup_epochs"],
                           seed=v["seed"] if seed is None else seed, s_grid=v["s_grid"])

    def pretrain_cfg(self, seed: Optional[int] = None) -> TrainConfig:
        v = self.values
        return TrainConfig(batch_size=v["pretrain_batch_size"], lr=v["pretrain_lr"],
                           weight_decay=v["pretrain_weight_decay"], epochs=v["pretrain_epochs"],
                           warmup_epochs=v["pretrain_warmup_epochs"], seed=v["seed"] if seed is None else seed)

    def task(self, role: str, seed: Optional[int] = None) -> ToyTaskSpec:
        v = self.values
        if role not in ("source", "target"):
            raise ValueError(f"role must be source or target, got {role!r}")
        val = v["source_val_per_class"] if role == "source" else v["val_per_class"]
        return ToyTaskSpec(kind=v["task"], image_size=v["image_size"], channels=v["in_channels"],
                           num_classes=v[f"{role}_classes"], shots=v[f"{role}_shots"], val_per_class=val,
                           test_per_class=v["test_per_class"], seed=v["seed"] if seed is None else seed,
                           signature_seed=v[f"{role}_signature"], noise=v["noise"],
                           phase_jitter=v["phase_jitter"], max_frequency=v["max_frequency"],
                           idx_images=v["idx_images"], idx_labels=v["idx_labels"])

    def with_(self, **overrides) -> "RunConfig":
        values = dict(self.values)
        for k, raw in overrides.items():
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}", (k,))
            values[k] = raw
        cfg = RunConfig(values, self.lines)
        cfg.validate()
        return cfg

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        return f"{key} (line {line})" if line else f"{key} (default)"

    def validate(self):
        v = self.values
        checks = [
            (("d", "N_h"), v["N_h"] > 0 and v["d"] % v["N_h"] == 0, f"d={v['d']} is not divisible by N_h={v['N_h']}"),
            (("image_size", "patch_size"), v["patch_size"] > 0 and v["image_size"] % v["patch_size"] == 0,
             f"image_size={v['image_size']} is not divisible by patch_size={v['patch_size']}"),
            (("precision",), v["precision"] in PRECISIONS, f"precision must be f32 or f64, got {v['precision']!r}"),
            (("warmup_epochs", "epochs"), v["warmup_epochs"] <= v["epochs"], "warmup_epochs exceeds epochs"),
            (("pretrain_warmup_epochs", "pretrain_epochs"), v["pretrain_warmup_epochs"] <= v["pretrain_epochs"],
             "pretrain_warmup_epochs exceeds pretrain_epochs"),
            (("s_grid",), len(v["s_grid"]) > 0, "s_grid is empty"),
            (("unravel_units",), all(k in UNIT_KINDS for k in v["unravel_units"]),
             f"unravel_units entries must be among {sorted(UNIT_KINDS)}"),
        ]
        for keys, ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg} [{', '.join(self.where(k) for k in keys)}]", keys)
        builders = [
            (("image_size", "patch_size", "in_channels", "d", "L", "N_h", "D"), lambda: self.vit(2)),
            (("method", "h", "r", "l", "s", "kernel_attn", "kernel_mlp", "activation"), lambda: self.petl),
            (("batch_size", "lr", "weight_decay", "epochs", "warmup_epochs"), self.train_cfg),
            (("pretrain_batch_size", "pretrain_lr", "pretrain_weight_decay"), self.pretrain_cfg),
            (("task", "source_classes", "source_shots", "source_val_per_class", "test_per_class"),
             lambda: self.task("source")),
            (("task", "target_classes", "target_shots", "val_per_class", "test_per_class"),
             lambda: self.task("target")),
        ]
        for keys, build in builders:
            try:
                build()
            except (ValueError, PETLError, DatasetError) as e:
                msg = str(e)
                for field_name, key in _FIELD_ALIASES.items():
                    msg = re.sub(rf"\b{field_name}\b", key, msg)
                named = [k for k in keys if re.search(rf"\b{k}\b", msg)] or [k for k in keys if k in self.lines] or list(keys)
                raise ConfigError(f"{msg} [{', '.join(self.where(k) for k in named)}]", tuple(named)) from None


def defaults() -> RunConfig:
    return RunConfig({k: spec.default for k, spec in KEYS.items()}, {})


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {k: spec.default for k, spec in KEYS.items()}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        for token in body.split():
            key, sep, value = token.partition("=")
            if not sep or not key:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {token!r}", (key,))
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}", (key,))
            if key in lines:
                raise ConfigError(f"{source}:{lineno}: {key} already set on line {lines[key]}", (key,))
            try:
                values[key] = KEYS[key].parse(value)
            except ValueError as e:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}", (key,)) from None
            lines[key] = lineno
    cfg = RunConfig(values, lines)
    cfg.validate()
    return cfg


def parse_config(path) -> RunConfig:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def render_config(cfg: RunConfig) -> str:
    """Every key with its current value, one per line (round-trips through the parser)."""
    out = []
    for k in KEYS:
        v = cfg[k]
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        out.append(f"{k}={v}")
    return "\n".join(out) + "\n"
