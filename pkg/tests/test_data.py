import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepbag.data import (
    RAW_CHANGE,
    RESIDUALIZED_CHANGE,
    Dataset,
    SyntheticSpec,
    TargetTransform,
    generate_synthetic,
    load_csv,
    make_target,
    standardize_target,
    write_csv,
    write_synthetic,
)
from stepbag.errors import (
    DegenerateBaseline,
    DuplicateId,
    InvalidSpec,
    MissingColumn,
    NonFiniteValue,
    NonNumericCell,
    TooFewSamples,
    ZeroVariance,
)


@pytest.fixture
def small_csv(tmp_path):
    path = tmp_path / "small.csv"
    path.write_text("id,f1,f2,y\na,1.5,2,3\nb,0.25,-1,4\nc,7,8,5.5\n")
    return path


def test_load_csv_basic(small_csv):
    d = load_csv(small_csv, "y", id_column="id")
    assert (d.n, d.p) == (3, 2)
    assert d.feature_ids == ("f1", "f2")
    assert d.sample_ids == ("a", "b", "c")
    np.testing.assert_array_equal(d.target, [3, 4, 5.5])
    np.testing.assert_array_equal(d.features[:, 0], [1.5, 0.25, 7])
    assert d.baseline is None


def test_load_csv_without_id_column_keeps_it_out_of_features(tmp_path):
    path = tmp_path / "noid.csv"
    path.write_text("f1,y,pre\n1,2,10\n3,4,11\n")
    d = load_csv(path, "y", baseline_column="pre")
    assert d.feature_ids == ("f1",)
    assert d.sample_ids == ("0", "1")
    np.testing.assert_array_equal(d.baseline, [10, 11])


def test_missing_target_column(small_csv):
    with pytest.raises(MissingColumn):
        load_csv(small_csv, "z", id_column="id")


def test_nan_cell_rejected(tmp_path):
    path = tmp_path / "nan.csv"
    path.write_text("id,f1,f2,y\na,NaN,2,3\nb,1,1,4\n")
    with pytest.raises(NonFiniteValue):
        load_csv(path, "y", id_column="id")


@pytest.mark.parametrize("text,exc", [
    ("id,f1,y\na,x,1\nb,2,3\n", NonNumericCell),
    ("id,f1,y\na,1,1\na,2,3\n", DuplicateId),
    ("id,f1,y\na,1,1\n", TooFewSamples),
    ("id,f1,y\na,inf,1\nb,2,3\n", NonFiniteValue),
])
def test_ingestion_errors(tmp_path, text, exc):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(exc):
        load_csv(path, "y", id_column="id")


def test_non_numeric_cell_reports_position(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("id,f1,y\na,1,1\nb,oops,3\n")
    with pytest.raises(NonNumericCell) as info:
        load_csv(path, "y", id_column="id")
    assert info.value.row == 2 and info.value.col == "f1"


def test_dataset_is_immutable(small_csv):
    d = load_csv(small_csv, "y", id_column="id")
    with pytest.raises(ValueError):
        d.features[0, 0] = 1.0
    with pytest.raises(AttributeError):
        d.target = np.zeros(3)


def test_dataset_rejects_duplicate_feature_ids():
    with pytest.raises(DuplicateId):
        Dataset(["a", "b"], ["f", "f"], np.zeros((2, 2)), [1, 2])


def test_csv_round_trip_is_text_identical(tmp_path):
    d = generate_synthetic(SyntheticSpec(6, 3, 1, (1.0,), 0.3, 0.2, seed=4, baseline_mean=80.0))
    first = tmp_path / "a.csv"
    second = tmp_path / "b.csv"
    write_csv(d, first)
    back = load_csv(first, "target", baseline_column="baseline", id_column="id")
    write_csv(back, second)
    assert first.read_text() == second.read_text()
    np.testing.assert_array_equal(back.features, d.features)
    np.testing.assert_array_equal(back.target, d.target)
    np.testing.assert_array_equal(back.baseline, d.baseline)


# --- targets --------------------------------------------------------------

def test_raw_change():
    np.testing.assert_array_equal(make_target([5, 7], [3, 4], RAW_CHANGE), [2, 3])


def test_residualized_change_of_exact_linear_change_is_zero():
    pre = np.array([1.0, 2.0, 4.0, 8.0])
    post = pre + (3.0 - 0.5 * pre)
    np.testing.assert_allclose(make_target(post, pre, RESIDUALIZED_CHANGE), 0.0, atol=1e-10)


def test_residualized_change_matches_closed_form_ols():
    # five hand-chosen points; change uncorrelated with pre by construction
    pre = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    change = np.array([1.0, -2.0, 3.0, -2.0, 1.0])
    post = pre + change
    # closed form: slope = sum(xc*yc)/sum(xc^2) = 0 -> residual = change - mean(change)
    xc = pre - pre.mean()
    slope = (xc * (change - change.mean())).sum() / (xc**2).sum()
    assert slope == 0.0
    expected = change - change.mean()
    np.testing.assert_allclose(make_target(post, pre), expected, atol=1e-12)


def test_residualized_change_degenerate_baseline():
    with pytest.raises(DegenerateBaseline):
        make_target([1, 2, 3], [5, 5, 5], RESIDUALIZED_CHANGE)


def test_residualized_needs_three_samples():
    with pytest.raises(TooFewSamples):
        make_target([1, 2], [3, 4], RESIDUALIZED_CHANGE)


vectors = st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=20)


@settings(max_examples=60, deadline=None)
@given(vectors, st.floats(-100, 100))
def test_raw_change_translation_equivariant(post, c):
    post = np.array(post)
    pre = np.linspace(0, 1, len(post))
    np.testing.assert_allclose(make_target(post + c, pre, RAW_CHANGE), make_target(post, pre, RAW_CHANGE) + c,
                               atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=25))
def test_residualized_change_uncorrelated_with_baseline(pairs):
    post, pre = map(np.array, zip(*pairs))
    if np.ptp(pre) < 1e-3:
        return
    r = make_target(post, pre, RESIDUALIZED_CHANGE)
    pc = pre - pre.mean()
    denom = np.linalg.norm(pc) * np.linalg.norm(r - r.mean())
    if denom > 1e-9:
        assert abs(pc @ (r - r.mean())) / denom < 1e-10


def test_standardize_symmetric_triple():
    z, mean, sd = standardize_target([1, 2, 3])
    np.testing.assert_allclose(z, [-1, 0, 1])
    assert (mean, sd) == (2.0, 1.0)


def test_standardize_zero_variance():
    with pytest.raises(ZeroVariance):
        standardize_target([5, 5, 5])


def test_standardize_textbook_vector():
    y = np.array([2, 4, 4, 4, 5, 5, 7, 9], dtype=float)
    z, mean, sd = standardize_target(y)
    assert mean == 5.0
    assert sd == pytest.approx(np.sqrt(32 / 7), rel=1e-15)
    assert abs(z.mean()) < 1e-15
    assert z.std(ddof=1) == pytest.approx(1.0, rel=1e-14)
    np.testing.assert_allclose(z * sd + mean, y, rtol=1e-14)


def test_target_transform_round_trip():
    pre = np.array([80.0, 60, 95, 70, 88])
    change = np.array([-10.0, -3, -20, -1, -12])
    tr = TargetTransform.fit(change, pre)
    z = tr.to_model_space(change, pre)
    assert z.std(ddof=1) == pytest.approx(1.0)
    back = tr.to_change(tr.from_model_space(z), pre)
    np.testing.assert_allclose(back, change, atol=1e-12)


def test_target_transform_without_baseline_falls_back_to_raw():
    tr = TargetTransform.fit([1.0, 2.0, 4.0], None, RESIDUALIZED_CHANGE, standardize=False)
    assert tr.mode == RAW_CHANGE and tr.sd == 1.0


# --- synthetic ------------------------------------------------------------

def test_zero_noise_identity():
    d = generate_synthetic(SyntheticSpec(n=4, p=2, k_informative=1, coefficients=(1.0,), noise_sd=0.0,
                                         correlation_rho=0.0, seed=7))
    np.testing.assert_array_equal(d.target, d.features[:, 0])
    assert d.metadata["informative"] == [0]


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(n=10, p=5, k_informative=2, coefficients=(1.0, -1.0), noise_sd=0.5,
                         correlation_rho=0.3, seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.target.tobytes() == b.target.tobytes()


def test_large_sample_slope():
    d = generate_synthetic(SyntheticSpec(n=1000, p=2, k_informative=1, coefficients=(2.0,), noise_sd=1.0,
                                         correlation_rho=0.0, seed=3))
    x, y = d.features[:, 0], d.target
    slope = np.cov(x, y, ddof=1)[0, 1] / x.var(ddof=1)
    assert 1.9 <= slope <= 2.1


def test_equicorrelation():
    d = generate_synthetic(SyntheticSpec(n=4000, p=3, k_informative=0, coefficients=(), noise_sd=1.0,
                                         correlation_rho=0.5, seed=1))
    c = np.corrcoef(d.features.T)
    off = c[np.triu_indices(3, 1)]
    assert np.all(np.abs(off - 0.5) < 0.05)


@pytest.mark.parametrize("kw", [
    dict(n=5, p=3, k_informative=4, coefficients=(1, 1, 1, 1)),
    dict(n=5, p=3, k_informative=1, coefficients=(1, 2)),
    dict(n=5, p=3, k_informative=1, coefficients=(1,), noise_sd=-1),
    dict(n=5, p=3, k_informative=1, coefficients=(1,), correlation_rho=1.0),
])
def test_invalid_spec(kw):
    with pytest.raises(InvalidSpec):
        generate_synthetic(SyntheticSpec(**kw))


def test_synthetic_sidecar(tmp_path):
    d = generate_synthetic(SyntheticSpec(5, 4, 2, (1.0, 2.0), seed=2))
    sidecar = write_synthetic(d, tmp_path / "d.csv")
    meta = json.loads(sidecar.read_text())
    assert meta["informative"] == [0, 1]
    assert meta["informative_ids"] == ["f0", "f1"]
    assert meta["spec"]["seed"] == 2
