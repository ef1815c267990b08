"""Command-line entry point (``fanlasso`` / ``python -m fanlasso``).

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric or convergence failure. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config, pipeline
from .config import ConfigError
from .data import (
    DataError, atomic_write_text, load_csv, read_results, summarize, summary_csv, write_results, write_table,
)
from .linalg import ConvergenceError
from .simulate import run_covariate_experiment, run_posterior_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "FANLASSO_THREADS"

log = logging.getLogger("fanlasso")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, configurable: bool) -> None:
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if configurable:
        p.add_argument("--config", help="YAML file with config overrides")
        p.add_argument("--preset", choices=("paper", "desk"), default=None)
        p.add_argument("--seed", type=int, default=None, help="master seed (simulations) or training seed")
        p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field, e.g. arch.depth=5 (repeatable; last wins)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fanlasso", description="Factor-augmented transfer learning for sparse regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("sim-covariate", help="eigenspace transfer under loading shift")
    _common(p, True)
    p.add_argument("--reps", type=int, help="shorthand for --set replications=N")

    p = sub.add_parser("sim-posterior", help="fine-tuning under a shift in the regression function")
    _common(p, True)
    p.add_argument("--reps", type=int, help="shorthand for --set replications=N")
    p.add_argument("--methods", help="comma-separated subset of methods")

    p = sub.add_parser("train-source", help="grid-search a source model on a CSV file")
    _common(p, True)
    p.add_argument("--source", required=True, help="source CSV")
    p.add_argument("--target", help="target CSV; its reserved rows feed the threshold rule")

    p = sub.add_parser("finetune", help="fit the target stage on top of a source model")
    _common(p, True)
    p.add_argument("--target", required=True, help="target CSV")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--source-model", help="bundle written by train-source (source architecture fixed)")
    g.add_argument("--source-data", help="source CSV; source and target architectures are tuned together")
    p.add_argument("--decouple", action="store_true",
                   help="with --source-data, tune the source on its own validation split first")

    p = sub.add_parser("predict", help="apply a model bundle to a CSV file")
    _common(p, False)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("evaluate", help="RMSE of predictions against labels")
    _common(p, False)
    p.add_argument("--predictions", help="CSV with 'prediction' and 'label' columns (as written by predict)")
    p.add_argument("--model")
    p.add_argument("--data")

    p = sub.add_parser("summarize", help="per-group mean and 95%% CI of a results CSV")
    _common(p, False)
    p.add_argument("--results", required=True)
    return parser


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value, where = flag, "--threads"
    elif os.environ.get(THREADS_ENV, "").strip():
        raw = os.environ[THREADS_ENV].strip()
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(THREADS_ENV, f"expected an integer, got {raw!r}") from None
        where = THREADS_ENV
    else:
        return 1
    if value < 1:
        raise ConfigError(where, "must be >= 1")
    return value


def _resolve(args, extra_sets=()):
    file_tree = config.load_file(args.config) if args.config else None
    return config.resolve(args.command, preset=args.preset, file_tree=file_tree, seed=args.seed,
                          sets=list(extra_sets) + list(args.sets))


def _write_sidecar(out: Path, args, cfg, record, extra=None):
    atomic_write_text(out / "run.json", config.sidecar(args.command, cfg, record, extra))


def _bundle_text(bundle: dict) -> str:
    return json.dumps(bundle, sort_keys=True, allow_nan=True) + "\n"


def cmd_sim(args, out: Path, threads: int) -> dict:
    extra = []
    if args.reps is not None:
        extra.append(f"replications={args.reps}")
    if getattr(args, "methods", None):
        extra.append(f"methods=[{args.methods}]")
    cfg, record = _resolve(args, extra)
    runner = run_covariate_experiment if args.command == "sim-covariate" else run_posterior_experiment
    start = time.monotonic()
    result = runner(cfg, threads=threads)
    write_results(result, out / "results.csv")
    _write_sidecar(out, args, cfg, record, {"rows": len(result.rows)})
    log.info("%d rows in %.1fs", len(result.rows), time.monotonic() - start)
    return {"results": str(out / "results.csv"), "rows": len(result.rows)}


def cmd_train_source(args, out: Path, threads: int) -> dict:
    cfg, record = _resolve(args)
    src = load_csv(args.source, cfg.label, cfg.normalize)
    tgt = load_csv(args.target, cfg.label, cfg.normalize) if args.target else None
    bundle = pipeline.run_source(src, cfg, tgt, threads=threads)
    atomic_write_text(out / "model.json", _bundle_text(bundle))
    _write_sidecar(out, args, cfg, record, {"metrics": _finite(bundle["metrics"])})
    return {"model": str(out / "model.json"), **_headline(bundle)}


def cmd_finetune(args, out: Path, threads: int) -> dict:
    if args.decouple and not args.source_data:
        raise UsageError("--decouple only applies with --source-data")
    cfg, record = _resolve(args, ["joint=false"] if args.decouple else [])
    tgt = load_csv(args.target, cfg.label, cfg.normalize)
    if args.source_model:
        bundle = pipeline.run_finetune(tgt, cfg, source_bundle=pipeline.read_bundle(_read(args.source_model)),
                                       threads=threads)
    else:
        src = load_csv(args.source_data, cfg.label, cfg.normalize)
        bundle = pipeline.run_finetune(tgt, cfg, src_ds=src, threads=threads)
    atomic_write_text(out / "model.json", _bundle_text(bundle))
    _write_sidecar(out, args, cfg, record, {"metrics": _finite(bundle["metrics"])})
    return {"model": str(out / "model.json"), **_headline(bundle)}


def cmd_predict(args, out: Path, threads: int) -> dict:
    bundle = pipeline.read_bundle(_read(args.model))
    ds = load_csv(args.data, bundle["label"], bundle["normalization"]["mode"], require_label=False)
    pred = pipeline.predict_rows(bundle, ds)
    has_label = not np.isnan(ds.y).all()
    header = ("row", "prediction", "label") if has_label else ("row", "prediction")
    rows = [(i, float(v), float(y)) if has_label else (i, float(v)) for i, (v, y) in enumerate(zip(pred, ds.y))]
    write_table(out / "predictions.csv", header, rows)
    return {"predictions": str(out / "predictions.csv"), "rows": len(rows), "dropped_rows": ds.dropped_rows}


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    import csv

    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or not {"prediction", "label"} <= set(reader.fieldnames):
                raise DataError(f"{path}: needs 'prediction' and 'label' columns")
            pairs = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    pairs.append((float(row["prediction"]), float(row["label"])))
                except (TypeError, ValueError):
                    raise DataError(f"{path}:{lineno}: non-numeric prediction or label") from None
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def cmd_evaluate(args, out: Path, threads: int) -> dict:
    if args.predictions and (args.model or args.data):
        raise UsageError("give either --predictions or --model with --data")
    if args.predictions:
        pred, y = _read_predictions(args.predictions)
    elif args.model and args.data:
        bundle = pipeline.read_bundle(_read(args.model))
        ds = load_csv(args.data, bundle["label"], bundle["normalization"]["mode"])
        pred, y = pipeline.predict_rows(bundle, ds), ds.y
    else:
        raise UsageError("evaluate needs --predictions, or --model and --data")
    if len(y) == 0:
        raise DataError("nothing to evaluate")
    if np.isnan(y).any():
        raise DataError("labels are missing")
    mse = float(np.mean((pred - y) ** 2))
    rmse = math.sqrt(mse)
    write_table(out / "evaluation.csv", ("n", "rmse", "mse"), [(len(y), rmse, mse)])
    return {"evaluation": str(out / "evaluation.csv"), "n": len(y), "rmse": rmse}


def cmd_summarize(args, out: Path, threads: int) -> dict:
    rows = summarize(read_results(args.results))
    atomic_write_text(out / "summary.csv", summary_csv(rows))
    return {"summary": str(out / "summary.csv"), "groups": len(rows)}


COMMANDS = {
    "sim-covariate": cmd_sim,
    "sim-posterior": cmd_sim,
    "train-source": cmd_train_source,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "summarize": cmd_summarize,
}


def _read(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc


def _finite(obj):
    """Replace NaN/inf with None so sidecars stay strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _headline(bundle: dict) -> dict:
    m = bundle["metrics"]
    return _finite({k: m[k] for k in ("valid_rmse", "test_rmse", "depth", "width") if k in m})


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        threads = resolve_threads(args.threads)
        out = Path(args.out)
        summary = COMMANDS[args.command](args, out, threads)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc), field=exc.path)
    except (ConvergenceError, FloatingPointError, ArithmeticError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except (DataError, ValueError, OSError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
