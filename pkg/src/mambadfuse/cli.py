"""Command line: fuse, train, eval, ablate.

Exit codes: 0 success, 2 input/config error, 3 checkpoint error, 4 dataset error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_pairs
from .data import DatasetError, PairDataset, load_pair_dirs, synthetic_dataset
from .images import UnsupportedImageError, list_images, read_gray, read_image, write_image
from .metrics import MetricReport, all_metrics, evaluate_dir
from .model import fingerprint, fuse_images, init_model, parameter_count, ycbcr_merge, ycbcr_split
from .train import TrainingAborted, train, write_curve

EXIT_OK, EXIT_INPUT, EXIT_CKPT, EXIT_DATA = 0, 2, 3, 4

log = logging.getLogger("mambadfuse")

# Ablation variants as architecture overrides on top of the run configuration.
VARIANTS: dict[str, tuple[str, dict]] = {
    "I": ("w/o high-level extraction", {"n_extract": 0}),
    "II": ("w/o shallow fuse", {"shallow_fuse": False}),
    "III": ("no swap, no exchange", {"exchange": "none"}),
    "IV": ("channel swap", {"exchange": "swap"}),
    "V": ("w/o deep fuse", {"deep_blocks": 0}),
    "VI": ("one-modal guidance (i1)", {"guidance": "i1"}),
    "VII": ("one-modal guidance (i2)", {"guidance": "i2"}),
    "VIII": ("w/o reconstruction blocks", {"n_recon": 0}),
    "full": ("full model", {}),
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    return parse_pairs("\n".join(pairs or []), "--set")


def _run_config(args) -> RunConfig:
    try:
        return load_config(getattr(args, "config", None), _overrides(getattr(args, "set", None)))
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, f"config error: {exc}") from exc


def _echo(cfg: RunConfig) -> None:
    print("# effective configuration")
    for k, v in cfg.header().items():
        print(f"# {k} = {v}")


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CKPT, f"checkpoint error: {exc}") from exc


def _read(path, gray: bool = True):
    try:
        return read_gray(path) if gray else read_image(path)
    except (OSError, UnsupportedImageError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read image {path}: {exc}") from exc


# ---------------------------------------------------------------- fuse

def fuse_pair(model, path_a, path_b, out, color: bool = False) -> None:
    a = _read(path_a)
    if color:
        vis = _read(path_b, gray=False)
        if vis.ndim != 3:
            raise CliError(EXIT_INPUT, f"--color expects an RGB visible image, {path_b} is grayscale")
        y, cb, cr = ycbcr_split(vis)
        b = y[0]
    else:
        b = _read(path_b)
    if a.shape != b.shape:
        raise CliError(EXIT_INPUT, f"size mismatch: {path_a} is {a.shape[0]}x{a.shape[1]}, "
                                   f"{path_b} is {b.shape[0]}x{b.shape[1]}")
    with T.no_grad():
        fused = fuse_images(a, b, model).data[0, 0].astype(np.float64)
    if color:
        rgb = np.clip(ycbcr_merge(fused[None], cb, cr), 0.0, 1.0)
        write_image(out, rgb)
    else:
        write_image(out, fused)


def cmd_fuse(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    a, b, out = Path(args.input_a), Path(args.input_b), Path(args.out)
    if a.is_dir():
        if not b.is_dir():
            raise CliError(EXIT_INPUT, "--input-a is a directory, so --input-b must be one too")
        out.mkdir(parents=True, exist_ok=True)
        fb = {p.stem: p for p in list_images(b)}
        pairs = [(p, fb[p.stem]) for p in list_images(a) if p.stem in fb]
        if not pairs:
            raise CliError(EXIT_DATA, f"no matching image pairs in {a} and {b}")
        for pa, pb in pairs:
            fuse_pair(ckpt.model, pa, pb, out / (pa.stem + ".png"), args.color)
        print(f"fused {len(pairs)} pairs into {out}")
    else:
        fuse_pair(ckpt.model, a, b, out, args.color)
        print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def _dataset(args, cfg: RunConfig) -> PairDataset:
    if getattr(args, "synthetic", 0):
        return synthetic_dataset(args.synthetic, max(64, cfg.train.crop), seed=cfg.train.seed,
                                 identical=getattr(args, "identical", False))
    da = args.data_a or cfg.paths["data_a"]
    db = args.data_b or cfg.paths["data_b"]
    if not da or not db:
        raise CliError(EXIT_DATA, "no training data: give --data-a/--data-b or --synthetic N")
    try:
        return load_pair_dirs(da, db, allow_partial=args.allow_partial)
    except DatasetError as exc:
        raise CliError(EXIT_DATA, f"dataset error: {exc}") from exc


def _train(model, ds, cfg: RunConfig, ckpt_path=None, resume=None):
    try:
        return train(model, ds, cfg.train, ckpt_path=ckpt_path, resume=resume, log_every=10)
    except DatasetError as exc:
        raise CliError(EXIT_DATA, f"dataset error: {exc}") from exc
    except TrainingAborted as exc:
        raise CliError(EXIT_DATA, f"training aborted: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _echo(cfg)
    ds = _dataset(args, cfg)
    out = Path(args.out_ckpt or cfg.paths["out_ckpt"] or "model.mdfz")
    resume = _load_ckpt(args.resume) if args.resume else None
    model = init_model(cfg.arch, seed=cfg.train.seed, precision=cfg.train.precision)
    print(f"# parameters = {parameter_count(model)}  fingerprint = {fingerprint(model)}")
    model, curve = _train(model, ds, cfg, ckpt_path=out, resume=resume)
    # final checkpoint again with the effective configuration in its metadata
    ck = _load_ckpt(out)
    save_checkpoint(out, model, ck.adam, {**ck.meta, "config": cfg.header()})
    write_curve(out.with_name(out.name + ".curve.tsv"), curve, cfg.header())
    if curve:
        print(f"trained {len(curve)} steps, final loss {curve[-1][1]:.4f}; checkpoint {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    for d in (args.dir_a, args.dir_b, args.dir_fused):
        if not Path(d).is_dir():
            raise CliError(EXIT_DATA, f"{d}: not a directory")
    header = {"dir_a": args.dir_a, "dir_b": args.dir_b, "dir_fused": args.dir_fused}
    try:
        report = evaluate_dir(args.dir_a, args.dir_b, args.dir_fused, header)
    except (OSError, UnsupportedImageError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"evaluation failed: {exc}") from exc
    if report.count == 0:
        raise CliError(EXIT_DATA, "no filename-matched (a, b, fused) triples to evaluate")
    report.save(args.out_report)
    print(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def evaluate_model(model, ds: PairDataset) -> dict[str, float]:
    rep = MetricReport()
    with T.no_grad():
        for name, a, b in zip(ds.names, ds.a, ds.b):
            f = fuse_images(a, b, model).data[0, 0].astype(np.float64)
            rep.add(name, all_metrics(f, a, b))
    return rep.mean()


def run_variant(variant: str, cfg: RunConfig, ds: PairDataset, steps: int | None = None):
    """Train one ablation variant with the shared config; returns (model, curve, metric row)."""
    if variant not in VARIANTS:
        raise CliError(EXIT_INPUT, f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    _, over = VARIANTS[variant]
    vals = {**cfg.header(), **{k: ("true" if v is True else "false" if v is False else str(v))
                               for k, v in over.items()}}
    if steps is not None:
        vals["steps"] = str(steps)
    try:
        vcfg = load_config(None, vals)
    except ConfigError as exc:
        raise CliError(EXIT_INPUT, f"config error: {exc}") from exc
    model = init_model(vcfg.arch, seed=vcfg.train.seed, precision=vcfg.train.precision)
    model, curve = _train(model, ds, vcfg)
    return model, curve, evaluate_model(model, ds)


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    _echo(cfg)
    ds = _dataset(args, cfg)
    report_path = Path(args.report or cfg.paths["out_report"] or "ablation.csv")
    if report_path.exists():
        try:
            report = MetricReport.from_csv(report_path.read_text())
        except (ValueError, StopIteration) as exc:
            raise CliError(EXIT_INPUT, f"cannot append to {report_path}: {exc}") from exc
    else:
        report = MetricReport(header=cfg.header())
    for v in args.variant:
        model, curve, row = run_variant(v, cfg, ds, args.steps)
        label = f"{v}: {VARIANTS[v][0]}"
        report.add(label, row)
        print(f"{label}  params={parameter_count(model)}  fingerprint={fingerprint(model)}")
    report.save(report_path)
    print(report.to_table())
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mambadfuse", description="Multi-modality image fusion with selective scans.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse one image pair (or two directories of pairs)")
    f.add_argument("--input-a", required=True, help="first modality (e.g. infrared)")
    f.add_argument("--input-b", required=True, help="second modality (e.g. visible)")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--color", action="store_true",
                   help="input-b is RGB: fuse its luminance and keep its chroma")
    f.set_defaults(func=cmd_fuse)

    def data_args(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--data-a")
        sp.add_argument("--data-b")
        sp.add_argument("--allow-partial", action="store_true",
                        help="skip unmatched filenames instead of failing")
        sp.add_argument("--synthetic", type=int, default=0, metavar="N",
                        help="train on N generated pairs instead of directories")
        sp.add_argument("--identical", action="store_true", help="synthetic pairs with equal modalities")

    t = sub.add_parser("train", help="train a model")
    data_args(t)
    t.add_argument("--out-ckpt")
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute the metric table for fused images")
    e.add_argument("--dir-a", required=True)
    e.add_argument("--dir-b", required=True)
    e.add_argument("--dir-fused", required=True)
    e.add_argument("--out-report", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    data_args(a)
    a.add_argument("--variant", action="append", required=True, choices=list(VARIANTS))
    a.add_argument("--report", help="CSV report to create or append to")
    a.add_argument("--steps", type=int, help="override the training steps per variant")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
