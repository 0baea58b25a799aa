"""Toy source -> target transfer over several seeds, all methods by default.

    python3 scripts/run_transfer.py --config configs/transfer.cfg --seeds 0,1,2 --out results/transfer
"""

import argparse
import logging
import time
from pathlib import Path

from petlvit.config import parse_config
from petlvit.experiment import run_transfer, summarize
from petlvit.petl import METHODS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/transfer.cfg")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--out", default="results/transfer")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = parse_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows_path = out / "rows.csv"
    rows_path.write_text("")

    def append(res):
        with rows_path.open("a") as f:
            f.write(res.to_csv(header=rows_path.stat().st_size == 0))

    t0 = time.perf_counter()
    summary = summarize(run_transfer(cfg, seeds, args.methods.split(","), on_result=append))
    (out / "summary.csv").write_text(summary.to_csv())
    print(f"source accuracy (mean over seeds {list(summary.seeds)}): {summary.source_acc:.4f}")
    print(summary.to_csv(), end="")
    for name, ok in summary.checks().items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"elapsed {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
