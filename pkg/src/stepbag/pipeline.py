"""Candidate selection, stepwise bagged-ensemble building and bias correction.

Methods (all share the same seeded stages, so fitting several methods on one
dataset is equivalent to fitting each alone):

``RF``        random forest on every feature
``RF_RF``     importance-based candidate selection, then a random forest
``RF_B``      candidate selection, then a bagged ensemble
``RF_BS``     candidate selection, then stepwise t-test gated bagging
``RF_BS_BC``  ``RF_BS`` plus an OOB-fitted linear bias correction
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .data import RESIDUALIZED_CHANGE, TARGET_MODES, Dataset, TargetTransform
from .ensemble import (
    BAGGED,
    RANDOM_FOREST,
    EnsembleConfig,
    EnsembleModel,
    ImportanceReport,
    fit_arrays,
    mse_present,
    oob_predictions,
    permutation_importance,
    rank_scores,
)
from .errors import DimensionMismatch, NoCandidates, TooFewPairs, TooFewReplicates, ZeroVariance
from .seeding import derive_seed
from .tree import TreeConfig

log = logging.getLogger(__name__)

METHODS = ("RF", "RF_RF", "RF_B", "RF_BS", "RF_BS_BC")
INIT_TOP = "top"
INIT_EMPTY = "empty"


def parse_method(name: str) -> str:
    """Accept ``rf-bs-bc``, ``RF_BS_BC`` and similar spellings."""
    key = name.strip().upper().replace("-", "_")
    if key not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return key


@dataclass(frozen=True)
class PipelineConfig:
    method: str = "RF_BS_BC"
    selection_trees: int = 5000
    final_trees: int = 1000
    m_ensembles: int = 10
    alpha: float = 0.05
    tree: TreeConfig = field(default_factory=TreeConfig)
    seed: int = 0
    target_mode: str = RESIDUALIZED_CHANGE
    standardize: bool = True
    stepwise_init: str = INIT_TOP
    refit_best: bool = False
    welch: bool = False
    importance_repeats: int = 1
    importance_scaled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", parse_method(self.method))
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie strictly between 0 and 1")
        for name in ("selection_trees", "final_trees", "importance_repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m_ensembles < 2:
            raise ValueError("m_ensembles must be >= 2 for the t-test")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target mode {self.target_mode!r}")
        if self.stepwise_init not in (INIT_TOP, INIT_EMPTY):
            raise ValueError(f"unknown stepwise init {self.stepwise_init!r}")

    def to_dict(self):
        d = asdict(self)
        d["seed"] = int(self.seed)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["tree"] = TreeConfig(**d["tree"])
        return cls(**d)


FAST_SELECTION_TREES = 500
FAST_FINAL_TREES = 200


def fast_mode(config: PipelineConfig) -> PipelineConfig:
    """Reduced tree counts for quick runs and CI."""
    return replace(config, selection_trees=FAST_SELECTION_TREES, final_trees=FAST_FINAL_TREES)


# --- candidate selection -------------------------------------------------

def selection_threshold(scores) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    lowest = scores.min()
    return float(-lowest) if lowest < 0 else 0.0


def select_candidates(report: ImportanceReport | np.ndarray) -> list:
    """Features scoring above the magnitude of the most negative score.

    With no negative score the threshold is zero. Candidates come back by
    descending score, ties by ascending index.
    """
    scores = np.asarray(getattr(report, "scores", report), dtype=np.float64)
    tau = selection_threshold(scores)
    keep = [int(j) for j in rank_scores(scores) if scores[j] > tau]
    if not keep:
        raise NoCandidates(f"no feature scores above {tau:g}")
    return keep


# --- t-test ---------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    p: float
    reject: bool
    df: float


def one_tailed_ttest(a, b, alpha=0.05, equal_var=True) -> TTestResult:
    """Two-sample t-test of H1: mean(a) < mean(b).

    Pooled variance by default, Welch with ``equal_var=False``. Two constant
    equal samples give ``p = 0.5``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise TooFewReplicates("each group needs at least 2 values")
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if equal_var:
        df = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    else:
        qa, qb = va / na, vb / nb
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1)) if se > 0 else na + nb - 2
    if se == 0:
        if diff == 0:
            return TTestResult(0.0, 0.5, False, df)
        t = -math.inf if diff < 0 else math.inf
        p = 0.0 if diff < 0 else 1.0
        return TTestResult(t, p, p < alpha, df)
    t = diff / se
    p = float(stats.t.cdf(t, df))
    return TTestResult(float(t), p, p < alpha, float(df))


# --- bias correction ------------------------------------------------------

def fit_bias_correction(oob_preds, y):
    """OLS of ``y`` on OOB predictions: returns ``(beta0, beta1, warnings)``.

    Pairs with a missing (NaN) prediction are dropped. Predictions with no
    spread give the identity map.
    """
    pred = np.asarray(oob_preds, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = ~np.isnan(pred)
    pred, y = pred[ok], y[ok]
    if len(pred) < 2:
        raise TooFewPairs("bias correction needs at least 2 (prediction, truth) pairs")
    pc = pred - pred.mean()
    if pc @ pc / len(pred) < 1e-12:
        msg = "OOB predictions have no spread; bias correction left at identity"
        log.warning(msg)
        return 0.0, 1.0, [msg]
    beta1 = float(pc @ (y - y.mean()) / (pc @ pc))
    beta0 = float(y.mean() - beta1 * pred.mean())
    return beta0, beta1, []


# --- stepwise building ----------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    feature: int
    mean_error: float
    best_mean_error: float
    t_stat: float
    p: float
    accepted: bool


@dataclass
class StepwiseResult:
    selected: list
    ensemble: EnsembleModel
    best_errors: np.ndarray
    history: list = field(default_factory=list)


def _replicate_errors(X, y, cols, config: PipelineConfig, step_key, feature_ids):
    errs = np.empty(config.m_ensembles)
    Xs = np.ascontiguousarray(X[:, cols]) if cols else np.zeros((X.shape[0], 0))
    for m in range(config.m_ensembles):
        ecfg = EnsembleConfig(config.final_trees, config.tree, BAGGED, derive_seed(config.seed, *step_key, m))
        model = fit_arrays(Xs, y, ecfg, cols, [feature_ids[c] for c in cols])
        errs[m] = mse_present(oob_predictions(model, Xs), y)
    return errs


def stepwise_build(data: Dataset, candidates, config: PipelineConfig, y=None) -> StepwiseResult:
    """Grow the input set one candidate at a time, in the given order.

    A candidate joins when the OOB errors of ``m_ensembles`` bagged ensembles
    with it are significantly lower (one-tailed t-test) than the current best
    errors. ``y`` overrides ``data.target`` (the pipeline passes the
    transformed target).
    """
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise NoCandidates("stepwise building needs at least one candidate")
    X = data.features
    y = np.ascontiguousarray(data.target if y is None else y, dtype=np.float64)
    ids = data.feature_ids
    if config.stepwise_init == INIT_TOP:
        selected = [candidates[0]]
        start = 1
    else:
        selected = []
        start = 0
    best = _replicate_errors(X, y, selected, config, ("stepwise", start - 1), ids)
    history = []
    for k in range(start, len(candidates)):
        v = candidates[k]
        trial = selected + [v]
        errs = _replicate_errors(X, y, trial, config, ("stepwise", k), ids)
        test = one_tailed_ttest(errs, best, config.alpha, equal_var=not config.welch)
        history.append(StepRecord(v, float(errs.mean()), float(best.mean()), test.t_stat, test.p, test.reject))
        if test.reject:
            selected = trial
            best = _replicate_errors(X, y, selected, config, ("stepwise_refit", k), ids) if config.refit_best else errs
    if not selected:
        raise NoCandidates("stepwise building accepted no candidate")
    final_cfg = EnsembleConfig(config.final_trees, config.tree, BAGGED, derive_seed(config.seed, "final"))
    final = fit_arrays(X[:, selected], y, final_cfg, selected, [ids[c] for c in selected])
    return StepwiseResult(selected, final, best, history)


# --- fitted model ---------------------------------------------------------

@dataclass(eq=False)
class PipelineModel:
    method: str
    selected: tuple
    ensemble: EnsembleModel
    beta0: float
    beta1: float
    transform: TargetTransform
    config: PipelineConfig
    feature_ids: tuple
    candidates: tuple = ()
    candidate_scores: tuple = ()
    oob_error: Optional[float] = None
    history: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def n_features(self):
        return len(self.feature_ids)

    @property
    def selected_ids(self):
        return [self.feature_ids[j] for j in self.selected]

    def predict_many(self, X) -> np.ndarray:
        """Target-space predictions for rows over the full feature space."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} columns, got shape {X.shape}")
        raw = self.ensemble.predict_local(X[:, list(self.selected)])
        return self.transform.from_model_space(self.beta1 * raw + self.beta0)

    def predict_change(self, X, baseline=None):
        return self.transform.to_change(self.predict_many(X), baseline)

    def summary(self) -> str:
        lines = [
            f"method: {self.method}",
            f"selected ({len(self.selected)}): {', '.join(self.selected_ids)}",
            f"candidates: {len(self.candidates)}",
            f"beta0: {self.beta0!r}",
            f"beta1: {self.beta1!r}",
            f"oob_error: {self.oob_error!r}",
            f"target: {self.transform.mode}, standardized={self.transform.standardize}",
        ]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "method": self.method,
            "feature_ids": list(self.feature_ids),
            "selected": list(self.selected),
            "candidates": list(self.candidates),
            "candidate_scores": [float(s) for s in self.candidate_scores],
            "beta0": self.beta0,
            "beta1": self.beta1,
            "oob_error": self.oob_error,
            "transform": self.transform.to_dict(),
            "config": self.config.to_dict(),
            "history": [asdict(h) for h in self.history],
            "warnings": list(self.warnings),
            "ensemble": self.ensemble.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            method=d["method"],
            selected=tuple(d["selected"]),
            ensemble=EnsembleModel.from_dict(d["ensemble"]),
            beta0=d["beta0"],
            beta1=d["beta1"],
            transform=TargetTransform.from_dict(d["transform"]),
            config=PipelineConfig.from_dict(d["config"]),
            feature_ids=tuple(d["feature_ids"]),
            candidates=tuple(d["candidates"]),
            candidate_scores=tuple(d["candidate_scores"]),
            oob_error=d["oob_error"],
            history=[StepRecord(**h) for h in d["history"]],
            warnings=list(d["warnings"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def predict(model: PipelineModel, x) -> float:
    """Prediction for one full-dimension feature vector, in target units."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise DimensionMismatch(f"expected a vector of length {model.n_features}, got shape {x.shape}")
    return float(model.predict_many(x[None, :])[0])


# --- fitting --------------------------------------------------------------

def fit_transform(data: Dataset, config: PipelineConfig) -> TargetTransform:
    try:
        return TargetTransform.fit(data.target, data.baseline, config.target_mode, config.standardize)
    except ZeroVariance:
        tr = TargetTransform.fit(data.target, data.baseline, config.target_mode, False)
        resid = tr.to_target_space(data.target, data.baseline)
        return replace(tr, mean=float(resid.mean()))


class PipelineFitter:
    """Fits one or more methods on a dataset, computing shared stages once."""

    def __init__(self, data: Dataset, config: PipelineConfig):
        self.data = data
        self.config = config
        self.transform = fit_transform(data, config)
        self.z = np.ascontiguousarray(self.transform.to_model_space(data.target, data.baseline))
        self._importance = None
        self._stepwise = None

    def _ensemble(self, cols, mode, n_trees, key):
        cfg = EnsembleConfig(n_trees, self.config.tree, mode, derive_seed(self.config.seed, key))
        X = np.ascontiguousarray(self.data.features[:, cols])
        return fit_arrays(X, self.z, cfg, cols, [self.data.feature_ids[c] for c in cols])

    def importance(self) -> ImportanceReport:
        if self._importance is None:
            forest = self._ensemble(list(range(self.data.p)), RANDOM_FOREST, self.config.selection_trees, "selection")
            self._importance = permutation_importance(
                forest, self.data, derive_seed(self.config.seed, "importance"),
                n_repeats=self.config.importance_repeats, scaled=self.config.importance_scaled, y=self.z)
        return self._importance

    def candidates(self):
        return select_candidates(self.importance())

    def stepwise(self) -> StepwiseResult:
        if self._stepwise is None:
            self._stepwise = stepwise_build(self.data, self.candidates(), self.config, y=self.z)
        return self._stepwise

    def fit(self, method=None) -> PipelineModel:
        method = parse_method(method or self.config.method)
        cfg = replace(self.config, method=method)
        notes = []
        cands, scores, history = (), (), []
        beta0, beta1 = 0.0, 1.0
        if method == "RF":
            cols = list(range(self.data.p))
            ens = self._ensemble(cols, RANDOM_FOREST, cfg.final_trees, "rf")
        else:
            cands = tuple(self.candidates())
            scores = tuple(float(self.importance().scores[j]) for j in cands)
            if method == "RF_RF":
                ens = self._ensemble(list(cands), RANDOM_FOREST, cfg.final_trees, "rf_rf")
            elif method == "RF_B":
                ens = self._ensemble(list(cands), BAGGED, cfg.final_trees, "rf_b")
            else:
                sw = self.stepwise()
                ens, history = sw.ensemble, sw.history
        Xs = np.ascontiguousarray(self.data.features[:, list(ens.columns)])
        oob = oob_predictions(ens, Xs)
        if method == "RF_BS_BC":
            beta0, beta1, notes = fit_bias_correction(oob, self.z)
        oob_err = mse_present(beta1 * oob + beta0, self.z)
        return PipelineModel(method, tuple(ens.columns), ens, beta0, beta1, self.transform, cfg,
                             self.data.feature_ids, cands, scores, oob_err, list(history), list(notes))


def fit_pipeline(data: Dataset, config: PipelineConfig) -> PipelineModel:
    return PipelineFitter(data, config).fit()


def fit_pipelines(data: Dataset, config: PipelineConfig, methods) -> dict:
    """Fit several methods at once; identical to fitting each separately."""
    fitter = PipelineFitter(data, config)
    return {parse_method(m): fitter.fit(m) for m in methods}


def oob_corrected(model: PipelineModel, data: Dataset) -> np.ndarray:
    """Bias-corrected OOB predictions of a fitted model on its training data (model space)."""
    Xs = data.features[:, list(model.selected)]
    return model.beta1 * oob_predictions(model.ensemble, Xs) + model.beta0
