"""Trainable-parameter table for every method at a given backbone size (ViT-B/16 by default)."""

import argparse
import sys

from petlvit.accounting import budget_report
from petlvit.config import defaults, parse_config
from petlvit.petl import METHODS, attach_petl
from petlvit.vit import build_vit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/vit_b16.cfg")
    args = ap.parse_args()
    cfg = parse_config(args.config) if args.config else defaults()
    vit_cfg = cfg.vit(cfg["target_classes"])
    header = True
    for method in METHODS:
        spec = cfg.petl.with_(method=method)
        model = attach_petl(build_vit(vit_cfg, abstract=True), spec, abstract=True)
        report = budget_report(model.registry, spec, vit_cfg)
        lines = report.csv().splitlines()
        sys.stdout.write("\n".join(lines if header else lines[1:]) + "\n")
        header = False


if __name__ == "__main__":
    main()
