"""``estf-tad``: synth, train, eval, gradcheck, bench and ablate.

Exit status is 0 on success, 1 for invalid input (bad flags, configs, files)
and 2 when the numerics fail (a diverged run, a failed gradient check).
``ESTF_NUM_THREADS`` caps the BLAS thread pool for every subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from .bench import DEFAULT_LENGTHS, MODULES, ablation_run, scan_scaling, write_ablation
from .config import (
    ConfigValidationError,
    read_json,
    resolve_config,
    save_config,
    spec_from_dict,
)
from .detector import EpochRecord, TrainingDiverged
from .gradcheck_suite import GRADCHECK_MODULES, run_gradchecks
from .instances import SegmentError
from .metrics import DEFAULT_THRESHOLDS, EvaluationError, evaluate, load_annotations, load_predictions, save_predictions
from .numerics import ConfigError, NumericError
from .numerics.io import TensorFileError
from .pipeline import load_datasets, run_training, validation_predictions
from .synthdata import SpecError, SynthSpec, checksum, generate, write_dataset

log = logging.getLogger("estf_tad")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
INPUT_ERRORS = (ConfigError, SpecError, EvaluationError, SegmentError, TensorFileError, OSError, ValueError)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here that is an input error (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("expected positive integers")
    return vals


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = spec_from_dict(read_json(args.spec), str(args.spec)) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    for split, n in ((0, spec.n_videos), (1, args.val_videos)):
        s = replace(spec, split=split, n_videos=n)
        s.validate()
        videos, annos = generate(s)
        name = "train" if split == 0 else "val"
        write_dataset(out / name, s, videos, annos)
        print(f"{name}: {n} videos -> {out / name}  sha256 {checksum(videos, annos)}")
    return EXIT_OK


def _load_cfg(args):
    cfg = resolve_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs, warmup_epochs=min(cfg.train.warmup_epochs, args.epochs)))
    cfg.validate(str(args.config or "preset:easy"))
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = load_datasets(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")

    def report(rec: EpochRecord) -> None:
        m = "-" if rec.mAP is None else f"{rec.mAP:.4f}"
        m5 = "-" if rec.map_at_05 is None else f"{rec.map_at_05:.4f}"
        print(f"epoch {rec.epoch:3d}/{cfg.train.epochs}  loss_cls {rec.loss_cls:.5f}  loss_reg {rec.loss_reg:.5f}  mAP {m}  mAP@0.5 {m5}", flush=True)

    try:
        model, result = run_training(cfg, data, out, on_epoch=report)
    except TrainingDiverged as exc:
        where = f"; last good parameters in {exc.checkpoint}" if exc.checkpoint else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    preds = validation_predictions(model, cfg, data)
    val_annos = data.val[1]
    save_predictions(out / "val_predictions.json", preds, val_annos.labels, [v.id for v in val_annos.videos])
    rep = evaluate(preds, val_annos)
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    sys.stdout.write(rep.format_table())
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    annos = load_annotations(args.annos)
    preds = load_predictions(args.preds, annos.labels)
    try:
        rep = evaluate(preds, annos, args.thresholds)
    except EvaluationError as exc:
        raise EvaluationError(f"{args.preds}: {exc}") from None
    sys.stdout.write(rep.format_table())
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    reports = run_gradchecks(args.module, seed)
    ok = True
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{name:<5} max_rel_error {rep.max_rel_error:.3e}  entries {rep.n_checked:4d}  tol {rep.tol_rel:.0e}  {status}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rep = scan_scaling(args.lengths, reps=args.reps, seed=seed, modules=args.modules)
    text = rep.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(rep.summary())
    for r in rep.rows:
        if r.flagged:
            print(f"warning: {r.module} T={r.length} is below timer resolution and was left out of the fit")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    data = load_datasets(cfg, args.data)

    def progress(row):
        score = "failed" if row.failed else f"{100 * row.average_map:.2f}"
        log.info("%s/%s: %s", row.group, row.name, score)

    report = ablation_run(cfg, data, asymmetry=not args.no_asymmetry, n_boot=args.bootstrap, on_row=progress)
    if args.out:
        write_ablation(report, args.out)
    sys.stdout.write(report.to_markdown())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> Parser:
    p = Parser(prog="estf-tad", description="Temporal action detection with ESTF adapters on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    def add(name, help_, fn):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="override the seed")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", "write train/ and val/ synthetic datasets", cmd_synth)
    sp.add_argument("--spec", help="JSON synthetic-data spec (defaults to the easy spec)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--val-videos", type=_positive, default=32, help="validation videos (default 32)")

    sp = add("train", "train adapters and head, then evaluate on the validation split", cmd_train)
    sp.add_argument("--config", help="JSON config or preset name (default: easy)")
    sp.add_argument("--data", help="dataset directory from `synth`; generated in memory when omitted")
    sp.add_argument("--out", required=True, help="output directory for checkpoint, log and predictions")
    sp.add_argument("--epochs", type=_positive, help="override train.epochs")

    sp = add("eval", "score predictions against annotations", cmd_eval)
    sp.add_argument("--preds", required=True, help="predictions JSON")
    sp.add_argument("--annos", required=True, help="annotations JSON")
    sp.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS), help="comma-separated tIoU thresholds")
    sp.add_argument("--json", help="also write the report as JSON here")

    sp = add("gradcheck", "compare taped gradients with central differences", cmd_gradcheck)
    sp.add_argument("--module", choices=GRADCHECK_MODULES + ("all",), default="all")

    sp = add("bench", "runtime and memory scaling of TB-SSM against attention", cmd_bench)
    sp.add_argument("--lengths", type=_ints, default=list(DEFAULT_LENGTHS), help="comma-separated sequence lengths")
    sp.add_argument("--reps", type=_positive, default=5, help="timed repetitions per length (default 5)")
    sp.add_argument("--modules", type=lambda s: s.split(","), default=list(MODULES), help="comma-separated subset of " + ",".join(MODULES))
    sp.add_argument("--out", help="write the CSV here as well")

    sp = add("ablate", "train the component and temporal-strategy variant grid", cmd_ablate)
    sp.add_argument("--config", help="JSON config or preset name (default: easy)")
    sp.add_argument("--data", help="dataset directory from `synth`")
    sp.add_argument("--out", help="directory for ablation.md, ablation.csv and ablation.json")
    sp.add_argument("--epochs", type=_positive, help="override train.epochs")
    sp.add_argument("--no-asymmetry", action="store_true", help="skip the tied-vs-independent A comparison")
    sp.add_argument("--bootstrap", type=_positive, default=200, help="bootstrap resamples for the asymmetry gap")
    return p


def _thread_limit():
    raw = os.environ.get("ESTF_NUM_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ESTF_NUM_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ESTF_NUM_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        threads = _thread_limit()
        if threads is None:
            return args.func(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
