"""Bagged tree ensembles and random forests with out-of-bag estimates."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatch, NoOobSamples, TooFewSamples
from .seeding import tree_seed as _tree_seed
from .tree import RegressionTree, TreeConfig, tie_priority

RANDOM_FOREST = "random_forest"
BAGGED = "bagged"


@dataclass(frozen=True)
class EnsembleConfig:
    """``mode`` picks mtry: ``ceil(p/3)`` for random forests, ``p`` for bagging.

    ``mtry`` overrides the mode rule. Of ``tree`` only ``min_leaf`` and
    ``max_depth`` are used; tree seeds come from ``seed``.
    """

    n_trees: int = 1000
    tree: TreeConfig = field(default_factory=TreeConfig)
    mode: str = RANDOM_FOREST
    seed: int = 0
    mtry: Optional[int] = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mode not in (RANDOM_FOREST, BAGGED):
            raise ValueError(f"unknown ensemble mode {self.mode!r}")

    def resolved_mtry(self, p):
        if self.mtry is not None:
            if not 1 <= self.mtry <= p:
                raise ValueError(f"mtry={self.mtry} outside [1, {p}]")
            return self.mtry
        if self.mode == BAGGED:
            return p
        return max(1, math.ceil(p / 3))

    def to_dict(self):
        d = asdict(self)
        d["seed"] = int(self.seed)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["tree"] = TreeConfig(**d["tree"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """A fitted ensemble.

    Node arrays are padded to a common width, one row per tree (see
    ``stepbag._kernels``). ``inbag[t, i]`` is how many times training sample
    ``i`` was drawn into tree ``t``. ``columns`` maps the ensemble's local
    feature indices back to columns of the dataset it was fitted on.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_nodes: np.ndarray
    inbag: np.ndarray
    columns: tuple
    feature_ids: tuple
    config: EnsembleConfig

    @property
    def n_trees(self):
        return self.feature.shape[0]

    @property
    def n_features(self):
        return len(self.columns)

    def tree_seed(self, t):
        """Seed that reproduces tree ``t`` through :func:`stepbag.tree.fit_tree`."""
        return int(_tree_seed(np.uint64(self.config.seed), t))

    def tree(self, t) -> RegressionTree:
        m = int(self.n_nodes[t])
        cfg = TreeConfig(self.config.resolved_mtry(self.n_features) if self.n_features else None,
                         self.config.tree.min_leaf, self.config.tree.max_depth, self.tree_seed(t))
        return RegressionTree(self.feature[t, :m], self.threshold[t, :m], self.left[t, :m], self.right[t, :m],
                              self.value[t, :m], self.n_samples[t, :m], self.n_features, cfg,
                              np.repeat(np.arange(self.inbag.shape[1]), self.inbag[t]))

    @property
    def trees(self):
        return [self.tree(t) for t in range(self.n_trees)]

    def tree_predictions(self, Xs):
        """Per-tree predictions for rows already restricted to ``columns``."""
        Xs = np.ascontiguousarray(Xs, dtype=np.float64)
        if Xs.ndim != 2 or Xs.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} columns, got shape {Xs.shape}")
        return K.predict_matrix(self.feature, self.threshold, self.left, self.right, self.value, Xs)

    def predict_local(self, Xs):
        return K.mean_over_trees(self.tree_predictions(Xs))

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "columns": list(self.columns),
            "feature_ids": list(self.feature_ids),
            "trees": [self.tree(t).to_dict() for t in range(self.n_trees)],
            "inbag": self.inbag.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        trees = [RegressionTree.from_dict(td) for td in d["trees"]]
        inbag = np.array(d["inbag"], dtype=np.int64)
        width = K.max_nodes_for(inbag.shape[1])
        return _stack(trees, inbag, tuple(d["columns"]), tuple(d["feature_ids"]),
                      EnsembleConfig.from_dict(d["config"]), width)


def _stack(trees, inbag, columns, feature_ids, config, width):
    T = len(trees)
    feature = np.full((T, width), K.LEAF, dtype=np.int64)
    threshold = np.zeros((T, width))
    left = np.full((T, width), -1, dtype=np.int64)
    right = np.full((T, width), -1, dtype=np.int64)
    value = np.zeros((T, width))
    n_samples = np.zeros((T, width), dtype=np.int64)
    n_nodes = np.zeros(T, dtype=np.int64)
    for t, tr in enumerate(trees):
        m = tr.n_nodes
        feature[t, :m] = tr.feature
        threshold[t, :m] = tr.threshold
        left[t, :m] = tr.left
        right[t, :m] = tr.right
        value[t, :m] = tr.value
        n_samples[t, :m] = tr.n_samples
        n_nodes[t] = m
    return EnsembleModel(feature, threshold, left, right, value, n_samples, n_nodes, inbag,
                         tuple(columns), tuple(feature_ids), config)


def fit_arrays(X, y, config: EnsembleConfig, columns=None, feature_ids=None, tie_order=None) -> EnsembleModel:
    """Fit on a plain matrix; ``columns``/``feature_ids`` are bookkeeping only.

    ``tie_order`` is passed through to the trees, see :func:`stepbag.tree.fit_tree`.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, p = X.shape
    if n < 2:
        raise TooFewSamples(f"need at least 2 samples, got {n}")
    if columns is None:
        columns = range(p)
    if feature_ids is None:
        feature_ids = [str(c) for c in columns]
    mtry = config.resolved_mtry(p) if p else 0
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T) if p else np.zeros((0, n), np.int64)
    max_depth = -1 if config.tree.max_depth is None else config.tree.max_depth
    arrays = K.fit_forest(X, y, order, tie_priority(tie_order, p), config.n_trees, np.uint64(config.seed), mtry,
                          config.tree.min_leaf, max_depth, True)
    return EnsembleModel(*arrays, tuple(int(c) for c in columns), tuple(feature_ids), config)


def fit_ensemble(data, config: EnsembleConfig, columns=None, tie_order=None) -> EnsembleModel:
    """Fit ``config.n_trees`` trees, each on its own bootstrap of the n samples.

    ``columns`` restricts the ensemble to a subset of ``data``'s features;
    the ensemble's feature space is then exactly that subset, in that order.
    """
    cols = list(range(data.p)) if columns is None else [int(c) for c in columns]
    return fit_arrays(data.features[:, cols], data.target, config, cols,
                      [data.feature_ids[c] for c in cols], tie_order)


def _restrict(model, data_or_X):
    # a Dataset is indexed by model.columns; a bare matrix is already local
    if hasattr(data_or_X, "features"):
        return data_or_X.features[:, list(model.columns)]
    return np.asarray(data_or_X, dtype=np.float64)


def ensemble_predict(model: EnsembleModel, x) -> float:
    """Unweighted mean of tree predictions for one vector over the model's own features."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise DimensionMismatch(f"expected a vector of length {model.n_features}, got shape {x.shape}")
    return float(model.predict_local(x[None, :])[0])


def oob_predictions(model: EnsembleModel, data) -> np.ndarray:
    """Per-sample OOB predictions on the training data; NaN marks samples never held out.

    ``data`` is the training :class:`Dataset`, or a matrix already restricted
    to the model's columns.
    """
    Xs = _restrict(model, data)
    if Xs.shape[0] != model.inbag.shape[1]:
        raise DimensionMismatch("data is not the training data of this model")
    return K.oob_average(model.tree_predictions(Xs), model.inbag)


def oob_error(model: EnsembleModel, data, y=None) -> float:
    """MSE between OOB predictions and targets, over samples that have one."""
    pred = oob_predictions(model, data)
    y = data.target if y is None else np.asarray(y, dtype=np.float64)
    return mse_present(pred, y)


def mse_present(pred, y):
    ok = ~np.isnan(pred)
    if not ok.any():
        raise NoOobSamples("no sample has an out-of-bag prediction")
    r = pred[ok] - y[ok]
    return float(r @ r) / int(ok.sum())


@dataclass
class ImportanceReport:
    scores: np.ndarray
    ranking: np.ndarray
    feature_ids: tuple = ()
    n_contributing: int = 0
    warnings: list = field(default_factory=list)

    def to_csv(self, path):
        rank = np.empty(len(self.scores), dtype=np.int64)
        rank[self.ranking] = np.arange(1, len(self.scores) + 1)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature_id", "score", "rank"])
            for j, s in enumerate(self.scores):
                w.writerow([self.feature_ids[j] if self.feature_ids else j, repr(float(s)), int(rank[j])])


def rank_scores(scores):
    """Indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def permutation_importance(model: EnsembleModel, data, seed=0, n_repeats=1, scaled=False,
                           y=None) -> ImportanceReport:
    """Mean increase of per-tree OOB MSE when one feature is shuffled among OOB samples.

    Scores are not clamped; irrelevant features hover around zero and may go
    negative. ``scaled=True`` divides by the standard error across trees.
    """
    Xs = np.ascontiguousarray(_restrict(model, data))
    y = np.ascontiguousarray(data.target if y is None else y, dtype=np.float64)
    deltas, contributed = K.importance_deltas(model.feature, model.threshold, model.left, model.right,
                                              model.value, model.inbag, Xs, y, np.uint64(seed), n_repeats)
    n_contrib = int(contributed.sum())
    if n_contrib == 0:
        raise NoOobSamples("no tree has two or more out-of-bag samples")
    notes = []
    skipped = model.n_trees - n_contrib
    if skipped:
        notes.append(f"{skipped} tree(s) with fewer than 2 OOB samples skipped")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    used = deltas[contributed]
    scores = used.sum(axis=0) / n_contrib
    if scaled:
        if n_contrib > 1:
            se = used.std(axis=0, ddof=1) / math.sqrt(n_contrib)
            scores = np.divide(scores, se, out=np.zeros_like(scores), where=se > 0)
        else:
            scores = np.zeros_like(scores)
    return ImportanceReport(scores, rank_scores(scores), model.feature_ids, n_contrib, notes)


def with_seed(config: EnsembleConfig, seed) -> EnsembleConfig:
    return replace(config, seed=int(seed))
