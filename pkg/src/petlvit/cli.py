"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric verification
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import gradcheck
from .accounting import BudgetMismatch, UnsupportedMethod, assert_budget, budget_report
from .checkpoint import CheckpointError, backbone_digest, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, defaults, parse_config
from .data import DatasetError, IdxFormatError, make_toy_dataset
from .petl import PETLError, attach_petl
from .train import DivergenceError, NonFiniteGradient, evaluate, finetune_with_sweep, pretrain, prepare_finetune, train
from .unravel import census, graph_from_kinds, graph_from_spec
from .vit import ViT, build_vit

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
ARCH_FIELDS = ("image_size", "patch_size", "in_channels", "dim", "depth", "num_heads", "mlp_dim")


class UsageError(Exception):
    pass


class VerificationFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else defaults()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        overrides["method"] = args.method
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = args.precision
    return cfg.with_(**overrides) if overrides else cfg


def _emit(text: str, out: Optional[str] = None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def _require(args, name: str):
    if not getattr(args, name, None):
        raise UsageError(f"--{name} is required for {args.command}")
    return getattr(args, name)


def _load_backbone(path: str, cfg: RunConfig) -> ViT:
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    model = load_checkpoint(path)
    want = cfg.vit(model.cfg.num_classes)
    bad = [f for f in ARCH_FIELDS if getattr(want, f) != getattr(model.cfg, f)]
    if bad:
        detail = ", ".join(f"{f}: config {getattr(want, f)} vs checkpoint {getattr(model.cfg, f)}" for f in bad)
        raise ConfigError(f"config and checkpoint disagree ({detail})", tuple(bad))
    if model.dtype != cfg.dtype:
        raise ConfigError(f"checkpoint holds {model.dtype} tensors but precision is {cfg['precision']}",
                          ("precision",))
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = _require(args, "out")
    source = make_toy_dataset(cfg.task("source"))
    model, metrics = pretrain(cfg.vit(source.num_classes), source, cfg.pretrain_cfg(), cfg.dtype)
    save_checkpoint(model, out)
    if args.log:
        Path(args.log).write_text(metrics.to_csv(), encoding="utf-8")
    _emit(_csv([["split", "accuracy"], ["source_val", repr(metrics.best_val)],
                ["source_test", repr(evaluate(model, source.test))]]))
    return EXIT_OK


def _finetune_row(model: ViT, cfg: RunConfig, target, s: float) -> list:
    report = budget_report(model.registry, model.petl_spec, model.cfg)
    return [cfg["method"], repr(float(s)), cfg["kernel_attn"], cfg["kernel_mlp"], cfg["seed"],
            repr(evaluate(model, target.val)), repr(evaluate(model, target.test)),
            report.backbone_trainable + report.petl, report.predicted]


ROW_HEADER = ["method", "s", "kernel_attn", "kernel_mlp", "seed", "val_acc", "test_acc", "trainable", "predicted"]


def _check_frozen(before: str, model: ViT, names: list[str]):
    if backbone_digest(model, names) != before:
        raise VerificationFailure("frozen backbone tensors changed during finetuning")


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    out = _require(args, "out")
    pretrained = _load_backbone(_require(args, "ckpt"), cfg)
    target = make_toy_dataset(cfg.task("target"))
    model = prepare_finetune(pretrained, cfg.petl, target.num_classes, cfg["seed"])
    frozen = [n for n, p in model.registry.items() if p.frozen]
    before = backbone_digest(model, frozen)
    metrics = train(model, target, cfg.train_cfg())
    _check_frozen(before, model, frozen)
    save_checkpoint(model, out)
    if args.log:
        Path(args.log).write_text(metrics.to_csv(), encoding="utf-8")
    _emit(_csv([ROW_HEADER, _finetune_row(model, cfg, target, cfg["s"])]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    pretrained = _load_backbone(_require(args, "ckpt"), cfg)
    target = make_toy_dataset(cfg.task("target"))
    best_model, best_row, rows = finetune_with_sweep(pretrained, cfg.petl, target, cfg.train_cfg())
    if args.out:
        save_checkpoint(best_model, args.out)
    table = [ROW_HEADER + ["best"]]
    for r in sorted(rows, key=lambda r: r.s):
        table.append([r.method, repr(r.s), r.kernel_attn, r.kernel_mlp, cfg["seed"], repr(r.val_acc),
                      repr(r.test_acc), r.trainable, r.predicted, int(r is best_row)])
    _emit(_csv(table))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _load_backbone(_require(args, "ckpt"), cfg)
    data = make_toy_dataset(cfg.task(args.task))
    if data.num_classes != model.cfg.num_classes:
        raise ConfigError(f"{args.task} task has {data.num_classes} classes, checkpoint head has "
                          f"{model.cfg.num_classes}", (f"{args.task}_classes",))
    split = getattr(data, args.split)
    _emit(_csv([["task", "split", "n", "accuracy"], [args.task, args.split, len(split), repr(evaluate(model, split))]]))
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = _load_config(args)
    model = build_vit(cfg.vit(cfg["target_classes"]), dtype=cfg.dtype, abstract=True)
    spec = cfg.petl
    attach_petl(model, spec, abstract=True)
    try:
        report = assert_budget(model.registry, spec, model.cfg)
    except UnsupportedMethod:
        report = budget_report(model.registry, spec, model.cfg)
    _emit(report.csv(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.precision == "f32":
        raise UsageError("finite-difference checks need --precision f64")
    cfg = _load_config(args)  # the checks themselves always run in float64
    vit_cfg = cfg.vit(cfg["target_classes"])
    methods = ["full", "convpass", "vpt"]
    if cfg["method"] not in methods + ["none"]:
        methods.append(cfg["method"])
    results = gradcheck.primitive_checks(cfg["seed"]) + gradcheck.block_checks(cfg["seed"])
    results += [gradcheck.model_check(m, vit_cfg, cfg["seed"]) for m in methods]
    _emit(gradcheck.table(results), args.out)
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise VerificationFailure(f"gradient check above tolerance: {', '.join(failed)}")
    return EXIT_OK


def cmd_unravel(args) -> int:
    cfg = _load_config(args)
    units = cfg["unravel_units"]
    graph = graph_from_kinds(units) if units else graph_from_spec(cfg.petl, cfg["L"])
    c = census(graph)
    _emit(_csv([["total", "type_i", "type_ii", "type_iii"], [c["total"], c["type_i"], c["type_ii"], c["type_iii"]]]),
          args.out)
    return EXIT_OK


COMMANDS = {
    "pretrain": (cmd_pretrain, "train a backbone on the source task and save a checkpoint"),
    "finetune": (cmd_finetune, "freeze, attach the configured method and train on the target task"),
    "eval": (cmd_eval, "top-1 accuracy of a checkpoint"),
    "count-params": (cmd_count_params, "trainable-parameter report"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient table"),
    "unravel": (cmd_unravel, "path census of the residual-unit graph"),
    "sweep": (cmd_sweep, "one finetune per s in s_grid, best on validation"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="petlvit", description="Frozen-ViT adaptation experiments at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--method", help="override the config method")
        p.add_argument("--precision", choices=("f32", "f64"), help="override the config precision")
        p.add_argument("--out", help="output path (checkpoint or CSV, per command)")
        if name in ("finetune", "sweep", "eval"):
            p.add_argument("--ckpt", help="input checkpoint")
        if name in ("pretrain", "finetune"):
            p.add_argument("--log", help="write the per-epoch metrics CSV here")
        if name == "eval":
            p.add_argument("--task", choices=("source", "target"), default="target")
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits on bad usage and on --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        return fn(args)
    except (UsageError, ConfigError, PETLError, DatasetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (VerificationFailure, BudgetMismatch, DivergenceError, NonFiniteGradient) as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, IdxFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
