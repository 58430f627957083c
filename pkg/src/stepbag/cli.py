"""Command-line interface.

Subcommands: ``synth``, ``fit``, ``predict``, ``loocv``, ``permtest``. Each
writes its outputs into ``--out`` together with ``run_config.txt``, the
resolved flags as ``key=value`` lines; ``--config run_config.txt`` replays a
run.

Exit codes: 0 success, 2 usage error, 3 input data error, 4 no candidate
feature survived selection, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import set_threads
from .data import RAW_CHANGE, RESIDUALIZED_CHANGE, SyntheticSpec, generate_synthetic, load_csv, read_table, write_synthetic
from .errors import DataError, FeatureMismatch, InvalidSpec, NoCandidates
from .evaluation import loocv_many, permutation_test_many, table_header, table_row
from .pipeline import INIT_EMPTY, INIT_TOP, METHODS, PipelineConfig, PipelineModel, fit_pipeline, parse_method
from .tree import TreeConfig

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NO_CANDIDATES = 4

FAST_N_PERMS = 200
THREADS_ENV = "STEPBAG_THREADS"

log = logging.getLogger("stepbag")


class UsageError(Exception):
    pass


def _method(text):
    try:
        return parse_method(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _add_data_args(p):
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--target-column", default="target")
    p.add_argument("--baseline-column", default=None)
    p.add_argument("--id-column", default=None)


def _add_pipeline_args(p, multi=False):
    if multi:
        p.add_argument("--method", type=_method, action="append", dest="methods",
                       help=f"one of {', '.join(METHODS)} (repeatable; default RF_BS_BC)")
    else:
        p.add_argument("--method", type=_method, default="RF_BS_BC")
    p.add_argument("--selection-trees", type=int, default=5000)
    p.add_argument("--final-trees", type=int, default=1000)
    p.add_argument("--m-ensembles", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--target-mode", choices=[RAW_CHANGE, RESIDUALIZED_CHANGE], default=RESIDUALIZED_CHANGE)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--stepwise-init", choices=[INIT_TOP, INIT_EMPTY], default=INIT_TOP)
    p.add_argument("--refit-best", action="store_true")
    p.add_argument("--welch", action="store_true")
    p.add_argument("--importance-repeats", type=int, default=1)
    p.add_argument("--importance-scaled", action="store_true")
    p.add_argument("--fast", action="store_true",
                   help="CI mode: 500 selection trees, 200 final trees, 200 permutations")


def build_parser():
    parser = argparse.ArgumentParser(prog="stepbag", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    common.add_argument("--config", default=None, help="key=value file supplying defaults")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a planted-signal dataset")
    p.add_argument("--n", type=int, default=19)
    p.add_argument("--p", type=int, default=267)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--coef", type=_floats, default=None, help="comma-separated weights (default all 1)")
    p.add_argument("--noise-sd", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--baseline-mean", type=float, default=None)
    p.add_argument("--baseline-sd", type=float, default=20.0)

    p = sub.add_parser("fit", parents=[common], help="fit a pipeline model")
    _add_data_args(p)
    _add_pipeline_args(p)

    p = sub.add_parser("predict", parents=[common], help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id-column", default=None)
    p.add_argument("--target-column", default=None, help="column to ignore if present")
    p.add_argument("--baseline-column", default=None)

    p = sub.add_parser("loocv", parents=[common], help="leave-one-out evaluation")
    _add_data_args(p)
    _add_pipeline_args(p, multi=True)

    p = sub.add_parser("permtest", parents=[common], help="label-permutation significance test")
    _add_data_args(p)
    _add_pipeline_args(p, multi=True)
    p.add_argument("--n-perms", type=int, default=None, help="default 1000 (200 with --fast)")
    p.add_argument("--two-sided-r", action="store_true")
    return parser


# --- config files ---------------------------------------------------------

def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}: malformed line {line!r}")
            values[key.strip()] = value.strip()
    return values


def _flag_args(config_values, parser, argv):
    """Turn key=value pairs into argv tokens placed before the real ones."""
    sub = argv[0]
    tokens = [sub]
    for key, value in config_values.items():
        if key in ("command", "out", "config"):
            continue
        flag = "--" + key.replace("_", "-")
        if value in ("", "None"):
            continue
        if value == "True":
            tokens.append(flag)
        elif value == "False":
            continue
        elif key == "methods":
            for m in value.split(","):
                tokens += ["--method", m]
        else:
            tokens += [flag, value]
    # explicit flags come later and win for single-valued options
    explicit = argv[1:]
    if "methods" in config_values and "--method" in explicit:
        drop = []
        for i, tok in enumerate(tokens):
            if tok == "--method":
                drop += [i, i + 1]
        tokens = [t for i, t in enumerate(tokens) if i not in drop]
    return tokens + explicit


def _format_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_run_config(args, out_dir):
    keys = sorted(k for k in vars(args) if k not in ("config", "verbose", "threads"))
    lines = [f"{k}={_format_value(getattr(args, k))}" for k in keys]
    (Path(out_dir) / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- helpers --------------------------------------------------------------

def pipeline_config(args, method=None) -> PipelineConfig:
    cfg = PipelineConfig(
        method=method or getattr(args, "method", None) or "RF_BS_BC",
        selection_trees=args.selection_trees,
        final_trees=args.final_trees,
        m_ensembles=args.m_ensembles,
        alpha=args.alpha,
        tree=TreeConfig(min_leaf=args.min_leaf, max_depth=args.max_depth),
        seed=args.seed,
        target_mode=args.target_mode,
        standardize=not args.no_standardize,
        stepwise_init=args.stepwise_init,
        refit_best=args.refit_best,
        welch=args.welch,
        importance_repeats=args.importance_repeats,
        importance_scaled=args.importance_scaled,
    )
    if args.fast:
        from .pipeline import fast_mode
        cfg = fast_mode(cfg)
    return cfg


def _load(args):
    return load_csv(args.data, args.target_column, args.baseline_column, args.id_column)


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


# --- subcommands ----------------------------------------------------------

def cmd_synth(args, out):
    spec = SyntheticSpec(n=args.n, p=args.p, k_informative=args.k,
                         coefficients=tuple(args.coef if args.coef is not None else [1.0] * max(args.k, 0)),
                         noise_sd=args.noise_sd, correlation_rho=args.rho, seed=args.seed,
                         baseline_mean=args.baseline_mean, baseline_sd=args.baseline_sd)
    data = generate_synthetic(spec)
    write_synthetic(data, out / "data.csv")


def cmd_fit(args, out):
    data = _load(args)
    model = fit_pipeline(data, pipeline_config(args))
    model.save(out / "model.json")
    _write_text(out / "summary.txt", model.summary())


def cmd_predict(args, out):
    model = PipelineModel.load(args.model)
    skip = {args.target_column, args.baseline_column} - {None}
    try:
        ids, names, X = read_table(args.data, args.id_column, skip=skip)
    except DataError as exc:
        raise FeatureMismatch(str(exc)) from exc
    if tuple(names) != tuple(model.feature_ids):
        missing = [f for f in model.feature_ids if f not in names]
        detail = f"missing {missing[:5]}" if missing else "columns differ in order or extra columns present"
        raise FeatureMismatch(f"data features do not match the model: {detail}")
    baseline = None
    if args.baseline_column is not None:
        _, _, B = read_table(args.data, args.id_column, [args.baseline_column])
        baseline = B[:, 0]
    pred = model.predict_many(X)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["sample_id", "predicted"]
        if baseline is not None:
            header += ["predicted_change", "predicted_post"]
        w.writerow(header)
        for i, sid in enumerate(ids):
            row = [sid, repr(float(pred[i]))]
            if baseline is not None:
                change = float(model.transform.to_change(pred[i:i + 1], baseline[i:i + 1])[0])
                row += [repr(change), repr(float(baseline[i] + change))]
            w.writerow(row)


def _methods(args):
    return args.methods or ["RF_BS_BC"]


def _write_reports(reports, data, out, title=None):
    rows = [table_header()] + [table_row(r) for r in reports.values()]
    for m, rep in reports.items():
        tag = m.lower()
        _write_text(out / f"report_{tag}.json", rep.to_json())
        rep.write_folds_csv(out / f"folds_{tag}.csv")
        rep.write_selection_csv(out / f"selection_{tag}.csv", data.feature_ids)
        if rep.permuted:
            keys = sorted(rep.permuted)
            with open(out / f"permuted_{tag}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["replicate", *keys])
                for r in range(len(rep.permuted[keys[0]])):
                    w.writerow([r, *("" if rep.permuted[k][r] is None else repr(rep.permuted[k][r]) for k in keys)])
    text = "\n".join(rows) + "\n"
    for m, rep in reports.items():
        text += (f"\n{m}: mean candidates {rep.mean_candidates:.2f}, mean selected {rep.mean_selected:.2f}, "
                 f"fallback folds {rep.n_fallback}")
    _write_text(out / "table.txt", text + "\n")
    print(text)


def cmd_loocv(args, out):
    data = _load(args)
    cfg = pipeline_config(args, _methods(args)[0])
    reports = loocv_many(data, cfg, _methods(args))
    _write_reports(reports, data, out)


def cmd_permtest(args, out):
    data = _load(args)
    methods = _methods(args)
    cfg = pipeline_config(args, methods[0])
    n_perms = args.n_perms if args.n_perms is not None else (FAST_N_PERMS if args.fast else 1000)

    def progress(done, total):
        if done % max(1, total // 10) == 0:
            log.info("permutation %d/%d", done, total)

    directions = {"pearson_r": "two-sided"} if args.two_sided_r else None
    reports = permutation_test_many(data, cfg, methods, n_perms, directions, progress=progress)
    _write_reports(reports, data, out)


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "predict": cmd_predict, "loocv": cmd_loocv,
            "permtest": cmd_permtest}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    config_path = pre.parse_known_args(argv[1:])[0].config if argv else None
    try:
        if config_path:
            argv = _flag_args(read_config_file(config_path), parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
        set_threads(int(threads) if threads else None)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_run_config(args, out)
        COMMANDS[args.command](args, out)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoCandidates as exc:
        print(f"error: no candidates: {exc}", file=sys.stderr)
        return EXIT_NO_CANDIDATES
    except (DataError, InvalidSpec, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
