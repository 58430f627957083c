import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import best_root_split
from stepbag.errors import DimensionMismatch, EmptySampleSet
from stepbag.tree import RegressionTree, TreeConfig, fit_tree, predict_tree, predict_tree_batch


def test_pure_root_is_single_leaf():
    t = fit_tree([[1.0], [2.0], [3.0]], [4.2, 4.2, 4.2], TreeConfig(min_leaf=1))
    assert t.n_nodes == 1
    assert predict_tree(t, [100.0]) == 4.2


def test_four_sample_split():
    # exhaustive enumeration: split between 2 and 3 gives child SSE 0 + 0
    X = [[1.0], [2.0], [3.0], [4.0]]
    y = [0.0, 0.0, 10.0, 10.0]
    assert best_root_split(X, y) == (0, 2.5)
    t = fit_tree(X, y, TreeConfig(mtry=1, min_leaf=1))
    assert (t.feature[0], t.threshold[0]) == (0, 2.5)
    assert predict_tree(t, [1.5]) == 0.0
    assert predict_tree(t, [3.7]) == 10.0


def test_min_leaf_at_least_n_gives_single_leaf():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    t = fit_tree(X, y, TreeConfig(min_leaf=6))
    assert t.n_nodes == 1
    assert t.value[0] == pytest.approx(y.mean())


def test_dimension_mismatch():
    t = fit_tree([[1.0, 2.0], [3.0, 4.0]], [1.0, 2.0], TreeConfig(min_leaf=1))
    with pytest.raises(DimensionMismatch):
        predict_tree(t, [1.0])


def test_empty_sample_set():
    with pytest.raises(EmptySampleSet):
        fit_tree([[1.0], [2.0]], [1.0, 2.0], sample_indices=[])


def test_bootstrap_multiset_weights_leaf_means():
    # sample 2 drawn twice: leaf mean over the multiset {y0, y1, y2, y2}
    t = fit_tree([[1.0], [2.0], [3.0]], [1.0, 2.0, 6.0], TreeConfig(min_leaf=5), sample_indices=[0, 1, 2, 2])
    assert t.n_nodes == 1
    assert t.value[0] == pytest.approx((1 + 2 + 6 + 6) / 4)
    assert t.n_samples[0] == 4


def _random_small(rng):
    n = int(rng.integers(2, 9))
    p = int(rng.integers(1, 3))
    if rng.random() < 0.5:
        X = rng.integers(0, 4, size=(n, p)).astype(float)
        y = rng.integers(0, 3, size=n).astype(float)
    else:
        X = rng.normal(size=(n, p))
        y = rng.normal(size=n)
    return X, y


def test_root_split_matches_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        X, y = _random_small(rng)
        t = fit_tree(X, y, TreeConfig(mtry=X.shape[1], min_leaf=1, seed=int(rng.integers(1 << 32))))
        expected = best_root_split(X, y)
        got = None if t.feature[0] < 0 else (int(t.feature[0]), float(t.threshold[0]))
        assert got == expected, (X, y)


def test_root_split_matches_oracle_with_min_leaf():
    rng = np.random.default_rng(7)
    for _ in range(100):
        X, y = _random_small(rng)
        t = fit_tree(X, y, TreeConfig(mtry=X.shape[1], min_leaf=2))
        expected = best_root_split(X, y, min_leaf=2)
        got = None if t.feature[0] < 0 else (int(t.feature[0]), float(t.threshold[0]))
        assert got == expected


def test_tie_prefers_lowest_feature():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    t = fit_tree(X, [0, 0, 1, 1], TreeConfig(min_leaf=1))
    assert t.feature[0] == 0


def test_tie_prefers_smallest_threshold():
    # splits at 1.5 and 2.5 both leave child SSE 0.5
    X = np.array([[1.0], [2.0], [3.0]])
    y = np.array([0.0, 1.0, 0.0])
    assert best_root_split(X, y) == (0, 1.5)
    t = fit_tree(X, y, TreeConfig(min_leaf=1))
    assert t.threshold[0] == 1.5


matrices = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=2), min_size=n, max_size=n),
    st.lists(st.floats(-10, 10), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(matrices)
def test_training_fidelity_and_invariants(data):
    X, y = np.array(data[0]), np.array(data[1])
    # unique rows are required for exact fidelity
    _, first = np.unique(X, axis=0, return_index=True)
    X, y = X[np.sort(first)], y[np.sort(first)]
    if len(y) < 2:
        return
    t = fit_tree(X, y, TreeConfig(min_leaf=1))
    np.testing.assert_array_equal(predict_tree_batch(t, X), y)
    # a threshold never equals the value of a sample passing through its node
    for x in X:
        k = 0
        while t.feature[k] >= 0:
            assert x[t.feature[k]] != t.threshold[k]
            k = t.left[k] if x[t.feature[k]] < t.threshold[k] else t.right[k]
    # each leaf predicts the mean of the training targets routed to it
    leaf_of = np.array([t.apply(x) for x in X])
    for leaf in set(leaf_of):
        assert t.value[leaf] == pytest.approx(y[leaf_of == leaf].mean(), abs=1e-9)


def test_leaves_respect_min_leaf():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(60, 4))
    y = X[:, 0] + 0.1 * rng.normal(size=60)
    t = fit_tree(X, y, TreeConfig(min_leaf=5, mtry=2, seed=9))
    leaves = t.leaves()
    assert len(leaves) > 1
    assert all(t.n_samples[k] >= 5 for k in leaves)


def test_piecewise_constant_within_leaf():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 2))
    y = np.sin(X[:, 0]) + X[:, 1]
    t = fit_tree(X, y, TreeConfig(min_leaf=3))
    probes = rng.normal(size=(300, 2))
    by_leaf = {}
    for x in probes:
        by_leaf.setdefault(t.apply(x), set()).add(predict_tree(t, x))
    assert all(len(v) == 1 for v in by_leaf.values())


def test_max_depth():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    t = fit_tree(X, y, TreeConfig(min_leaf=1, max_depth=2))
    depth = {0: 0}
    for k in range(t.n_nodes):
        if t.feature[k] >= 0:
            depth[t.left[k]] = depth[t.right[k]] = depth[k] + 1
    assert max(depth.values()) <= 2


def test_determinism_and_seed_sensitivity():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(40, 12))
    y = rng.normal(size=40)
    a = fit_tree(X, y, TreeConfig(mtry=3, min_leaf=2, seed=5))
    b = fit_tree(X, y, TreeConfig(mtry=3, min_leaf=2, seed=5))
    c = fit_tree(X, y, TreeConfig(mtry=3, min_leaf=2, seed=6))
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()


def test_json_round_trip_bit_exact():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    t = fit_tree(X, y, TreeConfig(min_leaf=2))
    back = RegressionTree.from_dict(json.loads(json.dumps(t.to_dict())))
    for name in ("feature", "threshold", "left", "right", "value", "n_samples"):
        assert getattr(back, name).tobytes() == getattr(t, name).tobytes()
    probes = rng.normal(size=(50, 3))
    assert predict_tree_batch(back, probes).tobytes() == predict_tree_batch(t, probes).tobytes()


def test_feature_subset_indices_are_local():
    X = np.array([[9.0, 1.0], [9.0, 2.0], [9.0, 3.0], [9.0, 4.0]])
    t = fit_tree(X, [0, 0, 1, 1], TreeConfig(min_leaf=1), feature_subset=[1])
    assert t.n_features == 1 and t.feature[0] == 0


def test_explicit_tie_order():
    X = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0], [3.0, 3.0, 3.0], [4.0, 4.0, 4.0]])
    y = [0, 0, 1, 1]
    assert fit_tree(X, y, TreeConfig(min_leaf=1), tie_order=[2, 0, 1]).feature[0] == 2
    assert fit_tree(X, y, TreeConfig(min_leaf=1, mtry=2, seed=3), tie_order=[1, 2, 0]).feature[0] in (1, 2)
    with pytest.raises(ValueError):
        fit_tree(X, y, tie_order=[0, 0, 1])
