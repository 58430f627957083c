"""Leave-one-out cross-validation, accuracy metrics and permutation tests."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import AllZeroTargets, ConstantVector, NoCandidates, TooFewSamples
from .pipeline import PipelineConfig, PipelineFitter, parse_method
from .seeding import derive_seed

ERROR_METRICS = ("mse", "rae", "mape")
METRIC_NAMES = ("mse", "sd_sq_err", "pearson_r", "rae", "mape", "sd_ape")
# direction in which a permuted statistic counts as "at least as extreme"
DEFAULT_DIRECTIONS = {"mse": "less", "rae": "less", "mape": "less", "pearson_r": "greater"}


@dataclass
class MetricBundle:
    mse: float
    sd_sq_err: float
    pearson_r: Optional[float]
    rae: Optional[float] = None
    mape: Optional[float] = None
    sd_ape: Optional[float] = None
    n_evaluated: int = 0
    n_mape_excluded: int = 0

    def get(self, name):
        return getattr(self, name)


def pearson_r(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ac = a - a.mean()
    bc = b - b.mean()
    saa, sbb = float(ac @ ac), float(bc @ bc)
    if saa == 0 or sbb == 0:
        raise ConstantVector("correlation is undefined for a constant vector")
    r = float(ac @ bc) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


def _sd(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def _post_metrics(bundle, true_post, pred_post, n):
    tp = np.asarray(true_post, dtype=np.float64)
    pp = np.asarray(pred_post, dtype=np.float64)
    if tp.shape != (n,) or pp.shape != (n,):
        raise ValueError("post-score vectors must match the change vectors in length")
    abs_err = np.abs(pp - tp)
    denom = float(np.abs(tp - tp.mean()).sum())
    if denom == 0:
        raise ConstantVector("RAE is undefined when all true post scores are equal")
    nz = tp != 0
    if not nz.any():
        raise AllZeroTargets("MAPE is undefined when every true post score is zero")
    ape = abs_err[nz] / np.abs(tp[nz])
    bundle.rae = float(abs_err.sum()) / denom
    bundle.mape = float(ape.mean())
    bundle.sd_ape = _sd(ape)
    bundle.n_mape_excluded = int((~nz).sum())


def _check_pair(true_change, pred_change):
    t = np.asarray(true_change, dtype=np.float64)
    p = np.asarray(pred_change, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("true and predicted vectors must be 1-D and of equal length")
    if len(t) < 2:
        raise TooFewSamples("metrics need at least 2 predictions")
    return t, p


def compute_metrics(true_change, pred_change, true_post=None, pred_post=None) -> MetricBundle:
    """Accuracy of predicted changes, plus post-score RAE/MAPE when given.

    RAE compares total absolute error with that of predicting the mean true
    post score; MAPE skips samples whose true post score is zero. Undefined
    quantities (r of a constant vector, RAE of constant post scores) are
    ``None``; :func:`safe_metrics` also says why.
    """
    return safe_metrics(true_change, pred_change, true_post, pred_post)[0]


def safe_metrics(true_change, pred_change, true_post=None, pred_post=None):
    """:func:`compute_metrics` plus notes on every quantity left undefined.

    Returns ``(bundle, notes)``.
    """
    t, p = _check_pair(true_change, pred_change)
    sq = (p - t) ** 2
    notes = []
    try:
        r = pearson_r(t, p)
    except ConstantVector as exc:
        r = None
        notes.append(f"pearson_r: {exc}")
    bundle = MetricBundle(float(sq.mean()), _sd(sq), r, n_evaluated=len(t))
    if true_post is not None and pred_post is not None:
        try:
            _post_metrics(bundle, true_post, pred_post, len(t))
        except (ConstantVector, AllZeroTargets) as exc:
            notes.append(f"post-score metrics: {exc}")
    return bundle, notes


@dataclass
class FoldResult:
    sample_id: str
    true_target: float
    pred_target: float
    true_post: Optional[float] = None
    pred_post: Optional[float] = None
    selected: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    fallback: bool = False


@dataclass
class EvalReport:
    method: str
    folds: list
    metrics: MetricBundle
    selection_frequency: dict
    candidate_frequency: dict
    config: PipelineConfig
    p_values: dict = field(default_factory=dict)
    permuted: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def n_fallback(self):
        return sum(f.fallback for f in self.folds)

    @property
    def mean_selected(self):
        return float(np.mean([len(f.selected) for f in self.folds]))

    @property
    def mean_candidates(self):
        return float(np.mean([len(f.candidates) for f in self.folds]))

    def to_dict(self):
        return {
            "method": self.method,
            "config": self.config.to_dict(),
            "metrics": asdict(self.metrics),
            "p_values": self.p_values,
            "permuted": {k: list(v) for k, v in self.permuted.items()},
            "selection_frequency": self.selection_frequency,
            "candidate_frequency": self.candidate_frequency,
            "mean_selected": self.mean_selected,
            "mean_candidates": self.mean_candidates,
            "n_fallback": self.n_fallback,
            "folds": [asdict(f) for f in self.folds],
            "notes": list(self.notes),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write_folds_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "true", "predicted", "true_post", "predicted_post", "n_selected", "fallback"])
            for f in self.folds:
                w.writerow([f.sample_id, repr(f.true_target), repr(f.pred_target), _fmt_opt(f.true_post),
                            _fmt_opt(f.pred_post), len(f.selected), int(f.fallback)])

    def write_selection_csv(self, path, feature_ids):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature_id", "candidate_count", "selected_count"])
            for fid in feature_ids:
                w.writerow([fid, self.candidate_frequency.get(fid, 0), self.selection_frequency.get(fid, 0)])


def _fmt_opt(x):
    return "" if x is None else repr(float(x))


def _fmt_cell(x, digits=2):
    return "-" if x is None else f"{x:.{digits}f}"


def table_header():
    return "| Algorithm | MSE ± SD | p_MSE | r | p_r | RAE | p_RAE | MAPE ± SD | p_MAPE |\n" \
           "|---|---|---|---|---|---|---|---|---|"


def table_row(report: EvalReport) -> str:
    """One line shaped like a row of the accuracy table."""
    m, p = report.metrics, report.p_values
    mape = "-" if m.mape is None else f"{m.mape:.2f} ± {m.sd_ape:.2f}"
    name = report.method.replace("_", "-")
    return (f"| {name} | {m.mse:.2f} ± {m.sd_sq_err:.2f} | {_fmt_cell(p.get('mse'), 3)} | "
            f"{_fmt_cell(m.pearson_r)} | {_fmt_cell(p.get('pearson_r'), 3)} | {_fmt_cell(m.rae)} | "
            f"{_fmt_cell(p.get('rae'), 3)} | {mape} | {_fmt_cell(p.get('mape'), 3)} |")


# --- LOOCV ----------------------------------------------------------------

@dataclass
class FoldFit:
    """Everything fitted inside one fold: per-method models or the fallback reason."""

    index: int
    models: dict
    failures: dict
    fallback_target: float
    transform: object


def fit_fold(data: Dataset, config: PipelineConfig, i: int, methods, train_target=None) -> FoldFit:
    """Fit every method on all samples but ``i``.

    ``train_target`` replaces the training rows' targets (used by the
    permutation test); the held-out target is never read.
    """
    n = data.n
    train = np.array([j for j in range(n) if j != i], dtype=np.int64)
    tr = data.subset(train)
    if train_target is not None:
        tr = tr.with_target(train_target)
    cfg = replace(config, seed=derive_seed(config.seed, "fold", i))
    fitter = PipelineFitter(tr, cfg)
    models, failures = {}, {}
    for m in methods:
        try:
            models[m] = fitter.fit(m)
        except NoCandidates as exc:
            failures[m] = str(exc)
    fallback = float(np.mean(fitter.transform.to_target_space(tr.target, tr.baseline)))
    return FoldFit(i, models, failures, fallback, fitter.transform)


def _loocv_core(data, config, methods, label_seed=None):
    methods = [parse_method(m) for m in methods]
    n = data.n
    if n < 3:
        raise TooFewSamples("leave-one-out needs at least 3 samples")
    work = data
    per = {m: [] for m in methods}
    for i in range(n):
        train_target = None
        if label_seed is not None:
            rng = np.random.default_rng(derive_seed(label_seed, "labels", i))
            idx = np.array([j for j in range(n) if j != i])
            train_target = work.target[idx][rng.permutation(n - 1)]
        fold = fit_fold(work, config, i, methods, train_target)
        x = work.features[i]
        base = None if work.baseline is None else work.baseline[i:i + 1]
        true_t = float(fold.transform.to_target_space(work.target[i:i + 1], base)[0])
        for m in methods:
            model = fold.models.get(m)
            if model is None:
                pred_t, sel, cands, fb = fold.fallback_target, [], [], True
            else:
                pred_t = float(model.predict_many(x[None, :])[0])
                sel, cands, fb = model.selected_ids, [work.feature_ids[j] for j in model.candidates], False
            true_post = pred_post = None
            if base is not None:
                true_post = float(base[0] + work.target[i])
                pred_post = float(base[0] + fold.transform.to_change([pred_t], base)[0])
            per[m].append(FoldResult(work.sample_ids[i], true_t, pred_t, true_post, pred_post,
                                     list(sel), list(cands), fb))
    return per


def _assemble(method, folds, config):
    true_t = [f.true_target for f in folds]
    pred_t = [f.pred_target for f in folds]
    posts = folds[0].true_post is not None
    metrics, notes = safe_metrics(true_t, pred_t,
                                  [f.true_post for f in folds] if posts else None,
                                  [f.pred_post for f in folds] if posts else None)
    sel = Counter(fid for f in folds for fid in f.selected)
    cand = Counter(fid for f in folds for fid in f.candidates)
    fb = sum(f.fallback for f in folds)
    if fb:
        notes.append(f"{fb} fold(s) had no candidates and predicted the training mean")
    return EvalReport(method, folds, metrics, dict(sorted(sel.items())), dict(sorted(cand.items())),
                      replace(config, method=method), notes=notes)


def loocv_many(data: Dataset, config: PipelineConfig, methods) -> dict:
    """Leave-one-out evaluation of several methods sharing fold-level stages."""
    per = _loocv_core(data, config, methods)
    return {m: _assemble(m, folds, config) for m, folds in per.items()}


def loocv(data: Dataset, config: PipelineConfig) -> EvalReport:
    """Leave-one-out evaluation of ``config.method``.

    Every stage, the target transform included, is refitted inside each fold.
    """
    return loocv_many(data, config, [config.method])[config.method]


# --- permutation test -----------------------------------------------------

def _extreme(value, observed, direction):
    if value is None or observed is None:
        return False
    if direction == "less":
        return value <= observed
    if direction == "greater":
        return value >= observed
    if direction == "two-sided":
        return abs(value) >= abs(observed)
    raise ValueError(f"unknown direction {direction!r}")


def permutation_test_many(data: Dataset, config: PipelineConfig, methods, n_perms=1000,
                          directions=None, observed=None, progress=None) -> dict:
    """Label-permutation p-values for several methods at once.

    Each replicate reruns the full LOOCV with the training labels of every
    fold shuffled; the held-out label is kept for scoring. A p-value is the
    fraction of replicates at least as extreme as the observed statistic.
    Returns ``{method: EvalReport}`` with ``p_values`` and ``permuted`` filled.
    """
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    directions = {**DEFAULT_DIRECTIONS, **(directions or {})}
    methods = [parse_method(m) for m in methods]
    reports = observed or loocv_many(data, config, methods)
    permuted = {m: {k: [] for k in directions} for m in methods}
    for r in range(n_perms):
        per = _loocv_core(data, config, methods, label_seed=derive_seed(config.seed, "perm", r))
        for m in methods:
            rep = _assemble(m, per[m], config)
            for k in directions:
                permuted[m][k].append(rep.metrics.get(k))
        if progress is not None:
            progress(r + 1, n_perms)
    for m in methods:
        rep = reports[m]
        for k, direction in directions.items():
            obs = rep.metrics.get(k)
            if obs is None:
                rep.p_values[k] = None
                continue
            hits = sum(_extreme(v, obs, direction) for v in permuted[m][k])
            rep.p_values[k] = hits / n_perms
        rep.permuted = permuted[m]
    return reports


def permutation_test(data: Dataset, config: PipelineConfig, n_perms=1000, directions=None) -> dict:
    """Per-metric p-values for ``config.method``."""
    rep = permutation_test_many(data, config, [config.method], n_perms, directions)[config.method]
    return rep.p_values
