"""Train every ablation variant on synthetic pairs and print the metric table.

Each variant shares the run configuration (desk preset unless --config says
otherwise) and differs only by its architecture override.
"""
import argparse
import logging
from pathlib import Path

from mambadfuse.cli import VARIANTS, run_variant
from mambadfuse.config import load_config
from mambadfuse.data import synthetic_dataset
from mambadfuse.metrics import MetricReport
from mambadfuse.model import fingerprint, parameter_count


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--steps", type=int, default=20, help="at least 1")
    p.add_argument("--variants", nargs="+", default=list(VARIANTS))
    p.add_argument("--out", type=Path, default=Path("ablation.csv"))
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_config(args.config, {"crop": str(args.size)})
    ds = synthetic_dataset(args.pairs, args.size, seed=cfg.train.seed)
    report = MetricReport(header={**cfg.header(), "steps": str(args.steps)})
    for v in args.variants:
        model, curve, row = run_variant(v, cfg, ds, steps=args.steps)
        report.add(f"{v}: {VARIANTS[v][0]}", row)
        print(f"{v:>4}  params {parameter_count(model):>7}  fingerprint {fingerprint(model)}"
              f"  final loss {curve[-1][1]:.3f}")
    report.save(args.out)
    print(report.to_table())


if __name__ == "__main__":
    main()
