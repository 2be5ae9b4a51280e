"""Desk-scale training smoke on synthetic pairs.

Trains the desk preset for each seed, prints the smoothed loss ratio and the
wall time, then checks identity reconstruction and texture retention on
held-out synthetic pairs. Curves go to --out as TSV files.
"""
import argparse
import logging
from pathlib import Path

from mambadfuse.experiments import held_out, identity_mae, smoke_run, texture_rows
from mambadfuse.train import write_curve


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", type=Path, default=Path("smoke_out"))
    p.add_argument("--skip-sanity", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    total = 0.0
    for seed in args.seeds:
        res = smoke_run(seed, args.steps)
        total += res.seconds
        write_curve(args.out / f"curve_seed{seed}.tsv", res.curve, {"seed": seed, "steps": args.steps})
        print(f"seed {seed}: ratio {res.ratio:.3f}  first {res.curve[0][1]:.3f}  last {res.curve[-1][1]:.3f}"
              f"  {res.seconds:.1f}s")
        if not args.skip_sanity and seed == args.seeds[0]:
            for row in texture_rows(res.model, held_out(seed=seed)):
                print("  {name}: EN {EN:.3f} (min src {EN_min:.3f})  SF {SF:.2f} (min src {SF_min:.2f})".format(**row))
    print(f"total training time {total:.1f}s for {len(args.seeds)} seeds")

    if not args.skip_sanity:
        ident = smoke_run(args.seeds[0], args.steps, identical=True)
        print(f"identical pairs: ratio {ident.ratio:.3f}, held-out MAE "
              f"{identity_mae(ident.model, held_out(seed=args.seeds[0], identical=True)):.4f}")


if __name__ == "__main__":
    main()
