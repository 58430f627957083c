"""Binary CART regression trees.

Splits minimise the summed squared error of the two children (equivalently
maximise variance reduction). At each node ``mtry`` features are drawn
without replacement as split candidates; thresholds sit at midpoints of
consecutive distinct values, and a sample goes left iff ``x[f] < threshold``.
Ties go to the lowest feature index (or the earliest feature of an explicit
``tie_order``), then the smallest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .errors import DimensionMismatch, EmptySampleSet


@dataclass(frozen=True)
class TreeConfig:
    mtry: Optional[int] = None  # None means all features
    min_leaf: int = 5
    max_depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def resolved_mtry(self, p):
        m = p if self.mtry is None else self.mtry
        if not 1 <= m <= max(p, 1):
            raise ValueError(f"mtry={m} outside [1, {p}]")
        return m


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """A fitted tree stored as parallel node arrays.

    ``feature[k] == -1`` marks a leaf whose prediction is ``value[k]``;
    ``n_samples[k]`` counts bootstrap draws reaching node ``k``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_features: int
    config: TreeConfig = field(default_factory=TreeConfig)
    sample_indices: Optional[np.ndarray] = None

    @property
    def n_nodes(self):
        return len(self.feature)

    def is_leaf(self, k):
        return self.feature[k] < 0

    def leaves(self):
        return [k for k in range(self.n_nodes) if self.feature[k] < 0]

    def used_features(self):
        return sorted({int(f) for f in self.feature if f >= 0})

    def apply(self, x):
        """Index of the leaf that ``x`` lands in."""
        k = 0
        while self.feature[k] >= 0:
            k = self.left[k] if x[self.feature[k]] < self.threshold[k] else self.right[k]
        return int(k)

    def to_dict(self):
        nodes = []
        for k in range(self.n_nodes):
            if self.feature[k] < 0:
                nodes.append({"leaf": True, "value": float(self.value[k]), "n_samples": int(self.n_samples[k])})
            else:
                nodes.append({
                    "leaf": False,
                    "feature": int(self.feature[k]),
                    "threshold": float(self.threshold[k]),
                    "left": int(self.left[k]),
                    "right": int(self.right[k]),
                    "value": float(self.value[k]),
                    "n_samples": int(self.n_samples[k]),
                })
        return {"n_features": self.n_features, "nodes": nodes}

    @classmethod
    def from_dict(cls, d, config=None):
        nodes = d["nodes"]
        m = len(nodes)
        feature = np.full(m, K.LEAF, dtype=np.int64)
        threshold = np.zeros(m)
        left = np.full(m, -1, dtype=np.int64)
        right = np.full(m, -1, dtype=np.int64)
        value = np.array([nd["value"] for nd in nodes], dtype=np.float64)
        n_samples = np.array([nd["n_samples"] for nd in nodes], dtype=np.int64)
        for k, nd in enumerate(nodes):
            if not nd["leaf"]:
                feature[k] = nd["feature"]
                threshold[k] = nd["threshold"]
                left[k] = nd["left"]
                right[k] = nd["right"]
        return cls(feature, threshold, left, right, value, n_samples, int(d["n_features"]),
                   config or TreeConfig())


def tie_priority(tie_order, p):
    if tie_order is None:
        return np.arange(p, dtype=np.int64)
    pr = np.asarray(tie_order, dtype=np.int64)
    if sorted(pr.tolist()) != list(range(p)):
        raise ValueError("tie_order must be a permutation of the feature indices")
    return np.ascontiguousarray(pr)


def fit_tree(X, y, config: TreeConfig = TreeConfig(), sample_indices=None, feature_subset=None,
             tie_order=None) -> RegressionTree:
    """Fit a tree on rows ``sample_indices`` (a multiset; default all rows).

    With ``feature_subset`` the tree sees only those columns, and its
    feature indices refer to positions within the subset. ``tie_order``
    replaces index order as the feature tie-break (earlier wins).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if feature_subset is not None:
        X = X[:, list(feature_subset)]
    X = np.ascontiguousarray(X)
    n, p = X.shape
    if len(y) != n:
        raise DimensionMismatch(f"{len(y)} targets for {n} rows")
    counts = np.ones(n, dtype=np.int64) if sample_indices is None else np.bincount(
        np.asarray(sample_indices, dtype=np.int64), minlength=n).astype(np.int64)
    if n == 0 or counts.sum() == 0:
        raise EmptySampleSet("cannot fit a tree on zero samples")
    mtry = config.resolved_mtry(p) if p else 0
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    mn = K.max_nodes_for(n)
    feature = np.full(mn, K.LEAF, dtype=np.int64)
    threshold = np.zeros(mn)
    left = np.full(mn, -1, dtype=np.int64)
    right = np.full(mn, -1, dtype=np.int64)
    value = np.zeros(mn)
    ncount = np.zeros(mn, dtype=np.int64)
    max_depth = -1 if config.max_depth is None else config.max_depth
    m = K.grow_tree(X, y, counts, order, tie_priority(tie_order, p), mtry, config.min_leaf, max_depth, np.uint64(config.seed),
                    feature, threshold, left, right, value, ncount)
    idx = np.repeat(np.arange(n), counts)
    return RegressionTree(feature[:m].copy(), threshold[:m].copy(), left[:m].copy(), right[:m].copy(),
                          value[:m].copy(), ncount[:m].copy(), p, config, idx)


def predict_tree(tree: RegressionTree, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise DimensionMismatch(f"expected a vector of length {tree.n_features}, got shape {x.shape}")
    return float(tree.value[tree.apply(x)])


def predict_tree_batch(tree: RegressionTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise DimensionMismatch(f"expected {tree.n_features} columns, got shape {X.shape}")
    return np.array([tree.value[tree.apply(x)] for x in X])
