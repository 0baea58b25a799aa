"""Multi-seed transfer runs and the ordering checks applied to their means."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .petl import METHODS
from .train import TransferResult, transfer_experiment

log = logging.getLogger(__name__)

SOURCE_FLOOR = 0.95
CONVPASS_MARGIN = 0.02


@dataclass
class TransferSummary:
    seeds: tuple
    source_acc: float
    target_acc: dict  # method -> mean test accuracy over seeds

    def checks(self, source_floor: float = SOURCE_FLOOR, margin: float = CONVPASS_MARGIN) -> dict[str, bool]:
        lin = self.target_acc["linear"]
        out = {"source": self.source_acc >= source_floor}
        if "convpass" in self.target_acc:
            out["convpass_margin"] = self.target_acc["convpass"] >= lin + margin
        for m, acc in self.target_acc.items():
            if m != "linear":
                out[f"{m}>=linear"] = acc >= lin
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "mean_test_acc", "delta_vs_linear"])
        lin = self.target_acc["linear"]
        for m, acc in self.target_acc.items():
            w.writerow([m, f"{acc:.4f}", f"{acc - lin:+.4f}"])
        return buf.getvalue()


def run_transfer(cfg: RunConfig, seeds: Sequence[int], methods: Sequence[str] = METHODS,
                 on_result: Optional[Callable[[TransferResult], None]] = None) -> list[TransferResult]:
    cfg.validate()
    specs = [cfg.petl.with_(method=m) for m in methods]
    results = []
    for seed in seeds:
        source, target = cfg.task("source", seed), cfg.task("target", seed)
        res = transfer_experiment(cfg.vit(source.num_classes), source, target, specs, cfg.pretrain_cfg(seed),
                                  cfg.train_cfg(seed), cfg.dtype)
        log.info("seed %d done, source acc %.4f", seed, res.source_acc)
        if on_result is not None:
            on_result(res)
        results.append(res)
    return results


def summarize(results: Sequence[TransferResult]) -> TransferSummary:
    if not results:
        raise ValueError("no transfer results to summarize")
    methods = [r.method for r in results[0].rows]
    acc = {m: float(np.mean([next(r.test_acc for r in res.rows if r.method == m) for res in results]))
           for m in methods}
    if "linear" not in acc:
        raise ValueError("the linear probe row is required as the baseline")
    return TransferSummary(tuple(r.seed for r in results), float(np.mean([r.source_acc for r in results])), acc)
