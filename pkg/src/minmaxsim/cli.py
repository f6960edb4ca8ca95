"""``minmaxsim`` command line: synth, split, train, eval, report, selftest.

Exit status is 0 on success, 1 for validation or usage errors and 2 for
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointIncompatibleError, load_checkpoint
from .config import RunConfig, load_run_config, write_resolved
from .data import SplitManifest, disjoint_split, scan_dataset
from .errors import DatasetError
from .evaluation import MODES, EvalSettings, evaluate_set, read_metrics, write_metrics, write_report
from .losses import LossWeights
from .selftest import run_all
from .synthdata import generate_dataset, generate_unlabeled_variants
from .training import train, train_supervised_baseline

log = logging.getLogger("minmaxsim")

DATA_ROOT_ENV = "MMS_DATA_ROOT"
CONFIG_ECHO = "config.resolved.json"
MANIFEST_COPY = "manifest.json"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
# Errors caused by the caller's input rather than by the computation.
INPUT_ERRORS = (ValueError, DatasetError, CheckpointIncompatibleError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _data_root(arg: str | None, sub: str = "") -> Path:
    if arg:
        return Path(arg)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise UsageError(f"no data directory given and {DATA_ROOT_ENV} is not set")
    return Path(env) / sub if sub else Path(env)


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    summary = generate_dataset(cfg.data.synth, out)
    n_unl = 0
    if cfg.data.unlabeled_per_image:
        n_unl = generate_unlabeled_variants(cfg.data.synth, cfg.data.unlabeled_per_image, out)
    n_test = cfg.data.test_images
    if n_test:
        generate_dataset(replace(cfg.data.synth, n_images=n_test), out / "test", prefix="tst",
                         start=cfg.data.synth.n_images)
    write_resolved(cfg, out / CONFIG_ECHO)
    fr = summary["foreground_fractions"]
    print(f"wrote {summary['n_images']} labeled, {n_unl} unlabeled, {n_test} test images to {out} "
          f"(mean foreground {sum(fr) / len(fr):.3f})")
    return EXIT_OK


def cmd_split(args) -> int:
    root = _data_root(args.data)
    labeled, unlabeled = scan_dataset(root)
    test = []
    if args.test:
        test, _ = scan_dataset(args.test)
    manifest = disjoint_split(labeled, args.fraction, args.seed, unlabeled=unlabeled, test=test)
    manifest.save(args.out)
    print(f"X1={len(manifest.labeled_x1)} X2={len(manifest.labeled_x2)} "
          f"unlabeled={len(manifest.unlabeled)} test={len(manifest.test)} -> {args.out}")
    return EXIT_OK


def _train_config(cfg: RunConfig, args) -> RunConfig:
    t = cfg.train
    if args.no_classifiers:
        t = replace(t, use_classifiers=False)
    if args.no_projectors:
        t = replace(t, use_projectors=False)
    if args.supervised_only:
        t = replace(t, loss_weights=LossWeights(1.0, 0.0, 0.0, 0.0), use_classifiers=False, use_projectors=False)
    return replace(cfg, train=t)


def cmd_train(args) -> int:
    cfg = _train_config(load_run_config(args.config), args)
    manifest = SplitManifest.load(args.manifest)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, run / CONFIG_ECHO)
    shutil.copyfile(args.manifest, run / MANIFEST_COPY)
    if args.supervised_only and manifest.label_fraction >= 1.0:
        state = train_supervised_baseline(manifest, cfg.train, cfg.augment, run, cfg.model)
    else:
        method = "supervised" if args.supervised_only else "mms"
        state = train(manifest, cfg.train, cfg.augment, run, cfg.model, method=method)
    last = state.loss_history[-1]["total"] if state.loss_history else float("nan")
    print(f"trained {state.epoch} epochs, final total loss {last:.6f}; run directory {run}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    settings = EvalSettings()
    if args.config:
        settings = load_run_config(args.config).eval
    settings = replace(settings,
                       threshold=args.threshold if args.threshold is not None else settings.threshold,
                       mode=args.mode or settings.mode, dump_dir=args.dump)
    test, _ = scan_dataset(_data_root(args.test, "test"))
    report = evaluate_set(state, test, settings, method=args.method)
    write_metrics(report, args.out)
    b = report.network_breakdown
    print(f"{report.method}: mean DSC {report.mean_dsc:.4f} ({settings.mode}) over {len(report.per_image)} "
          f"images; net1 {b['net1']:.4f} net2 {b['net2']:.4f} ensemble {b['ensemble']:.4f}")
    for path, err in report.errors:
        print(f"error: {path}: {err}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_RUNTIME


def cmd_report(args) -> int:
    reports = [read_metrics(p) for p in args.inputs]
    labels = args.labels or [r.method for r in reports]
    if len(labels) != len(reports):
        raise UsageError("--labels must name every input")
    print(write_report(reports, labels, args.out), end="")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = run_all(echo=print)
    failed = [r.name for r in results if not r.passed]
    print("selftest: " + ("all checks passed" if not failed else "FAILED " + ", ".join(failed)))
    return EXIT_OK if not failed else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="minmaxsim", description="Two-network semi-supervised segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic tool-segmentation dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="build a disjoint labeled split manifest")
    s.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--test", help="held-out dataset root recorded in the manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train both networks into a run directory")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--supervised-only", action="store_true",
                   help="supervised loss only; a single network when every label is used")
    s.add_argument("--no-classifiers", action="store_true")
    s.add_argument("--no-projectors", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a labeled test set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", help=f"test dataset root (default ${DATA_ROOT_ENV}/test)")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="run config whose eval section supplies defaults")
    s.add_argument("--threshold", type=float)
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--method", help="method name written to the CSV")
    s.add_argument("--dump", help="directory for predicted masks")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="combine metric CSVs into a comparison table")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--labels", nargs="+")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the oracle, gradient and property checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"minmaxsim: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except INPUT_ERRORS as exc:
        print(f"minmaxsim {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"minmaxsim {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
