"""Command-line entry point.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .bench import DEFAULT_MAX_BYTES, run_bench
from .checkpoint import save_checkpoint
from .config import RunConfig, load_run_config, write_resolved
from .data import generate_dataset, read_manifest, write_dataset
from .errors import CapacityError, ConfigError, DataError, FormatError, TransferError
from .evaluation import (
    CvReport,
    ablation_markdown,
    compare_to_baseline,
    cross_validate,
    roc_auc,
    stratified_holdout,
    write_ablation_csv,
)
from .model import ModelConfig, build_model, parse_label
from .tensor import Rng, dtype_for
from .train import dvoxres_factory, finetune, predict, train

log = logging.getLogger("dvoxres")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.apply_seed(args.seed)
    if args.out is not None:
        cfg.out = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    dtype_for(cfg.precision)
    return cfg


def _dataset(cfg: RunConfig):
    if cfg.data.manifest is not None:
        return read_manifest(cfg.data.manifest)
    return generate_dataset(cfg.data.synth)


def _slug(conv, voxres) -> str:
    """File-name form of a placement label: "4, 5 ; 2, 3" -> "4-5_2-3", "- ; -" -> "none_none"."""
    return "_".join("-".join(str(i) for i in sorted(s)) or "none" for s in (conv, voxres))


def cmd_gradcheck(args) -> int:
    ops = [o.strip() for o in args.ops.split(",")] if args.ops else None
    if ops:
        unknown = [o for o in ops if o not in gc.CHECKS]
        if unknown:
            raise UsageError(f"unknown op(s) {', '.join(unknown)}; choose from {', '.join(gc.CHECKS)}")
    rows = gc.summarize(gc.run_gradcheck(ops, seed=args.seed or 0, trials=args.trials))
    print(f"{'op':<20} {'slot':<16} {'max rel error':>14}  status")
    for op, slot, err, ok in rows:
        print(f"{op:<20} {slot:<16} {err:>14.3e}  {'pass' if ok else 'FAIL'}")
    failed = [r for r in rows if not r[3]]
    print(f"{len(rows) - len(failed)}/{len(rows)} gradient slots within {gc.TOLERANCE:g}")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if cfg.data.synth is None:
        raise UsageError("gen-data needs a 'data.synth' section")
    out = Path(cfg.out)
    manifest = write_dataset(out / "data", generate_dataset(cfg.data.synth))
    write_resolved(cfg, out)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out)
    dtype = dtype_for(cfg.precision)
    samples = _dataset(cfg)
    labels = np.array([s.label for s in samples])
    fit_idx, val_idx = stratified_holdout(labels, 0.2, Rng(cfg.train.seed).split("val"))
    fit = [samples[i] for i in fit_idx]
    val = [samples[i] for i in val_idx]
    if args.init:
        model, history = finetune(args.init, cfg.model, fit, val, cfg.train, dtype=dtype)
    else:
        model, history = train(build_model(cfg.model, dtype=dtype), fit, val, cfg.train)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt",
                    metadata={"epoch": history.best_epoch, "seed": cfg.train.seed, "label": cfg.model.label})
    history.write_csv(out / "train_log.csv")
    write_resolved(cfg, out)
    best = next((r for r in history.records if r.epoch == history.best_epoch), None)
    print(f"best epoch {history.best_epoch}" + (f", validation AUC {best.val_auc:.4f}" if best else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = dtype_for(cfg.precision)
    samples = _dataset(cfg)
    if args.checkpoint:
        from .checkpoint import load_checkpoint
        model = load_checkpoint(args.checkpoint, cfg.model, dtype=dtype)
        auc = roc_auc(predict(model, samples), [s.label for s in samples])
        with open(out / "transfer_auc.csv", "w", newline="") as fh:
            csv.writer(fh).writerows([["config", "auc"], [cfg.model.label, repr(auc)]])
        print(f"transferred weights, no training: AUC {auc:.4f}")
    factory = dvoxres_factory(cfg.model, dtype, init_checkpoint=args.checkpoint)
    report = cross_validate(factory, samples, cfg.eval, cfg.train, label=cfg.model.label)
    report.write_csv(out / "cv_report.csv")
    write_resolved(cfg, out)
    what = "fine-tuned" if args.checkpoint else "from scratch"
    print(f"{report.label} ({what}): ROC/AUC {report.mean:.3f} +/- {report.std:.3f} over {report.scores.size} folds")
    return EXIT_OK


def run_ablation(cfg: RunConfig, labels: list[str], samples=None) -> tuple[list, str]:
    """Cross-validate every label on identical folds; returns (rows, markdown table)."""
    samples = samples if samples is not None else _dataset(cfg)
    dtype = dtype_for(cfg.precision)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for label in labels:
        conv, voxres = parse_label(label)
        mcfg = dataclasses.replace(cfg.model, deform_conv_idx=conv, deform_voxres_idx=voxres)
        log.info("cross-validating %s", mcfg.label)
        rep = cross_validate(dvoxres_factory(mcfg, dtype), samples, cfg.eval, cfg.train, label=mcfg.label)
        rep.write_csv(out / f"cv_{_slug(conv, voxres)}.csv")
        reports.append(rep)
    rows = compare_to_baseline(reports)
    table = ablation_markdown(rows)
    (out / "ablation.md").write_text(table)
    write_ablation_csv(rows, out / "ablation.csv")
    write_resolved(cfg, out)
    return rows, table


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    labels = args.labels or ["- ; -", "4 ; 2", "4, 5 ; 2, 3"]
    for label in labels:
        parse_label(label)
    _, table = run_ablation(cfg, labels)
    print(table, end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    if not args.sizes:
        raise UsageError("bench needs at least one --sizes entry (extent:channels:kernel)")
    precision = args.precision or "f32"
    rows = run_bench(args.sizes, dtype=dtype_for(precision), max_bytes=args.max_bytes, repeats=args.repeats)
    header = ["extent", "channels", "kernel", "offset_channels", "regular_s", "deformable_s",
              "regular_cols_bytes", "offset_map_bytes"]
    print(" ".join(f"{h:>18}" for h in header))
    for r in rows:
        vals = [r.extent, r.channels, r.kernel, r.offset_channels, f"{r.regular_s:.4f}", f"{r.deformable_s:.4f}",
                r.regular_bytes, r.offset_map_bytes]
        print(" ".join(f"{v:>18}" for v in vals))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([r.extent, r.channels, r.kernel, r.offset_channels, r.regular_s, r.deformable_s,
                            r.regular_bytes, r.offset_map_bytes])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed in the configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dvoxres", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    g.add_argument("--ops", help=f"comma-separated subset of: {', '.join(gc.CHECKS)}")
    g.add_argument("--trials", type=int, default=3)
    g.set_defaults(func=cmd_gradcheck)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset and manifest").set_defaults(
        func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model, write checkpoint and log")
    t.add_argument("--init", help="checkpoint to transfer weights from (fine-tuning)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="repeated k-fold cross-validation")
    e.add_argument("--checkpoint", help="initialize every fold from this checkpoint")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="compare deformable placements")
    a.add_argument("labels", nargs="*", help='placement labels such as "- ; -" or "4, 5 ; 2, 3"')
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", parents=[common], help="regular vs deformable convolution cost")
    b.add_argument("--sizes", nargs="*", default=None, help="extent:channels:kernel entries")
    b.add_argument("--repeats", type=int, default=2)
    b.add_argument("--max-bytes", type=int, default=DEFAULT_MAX_BYTES)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return args.func(args)
    except (UsageError, ConfigError, CapacityError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, TransferError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
