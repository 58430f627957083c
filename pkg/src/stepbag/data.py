"""Datasets, CSV ingestion, target construction and synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateBaseline,
    DuplicateId,
    InvalidSpec,
    MissingColumn,
    NonFiniteValue,
    NonNumericCell,
    TooFewSamples,
    ZeroVariance,
)

RAW_CHANGE = "raw_change"
RESIDUALIZED_CHANGE = "residualized_change"
TARGET_MODES = (RAW_CHANGE, RESIDUALIZED_CHANGE)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable n x p feature matrix with a continuous target.

    ``baseline`` holds the optional pre-treatment score. It never enters the
    feature matrix; it is only used to residualize the target and to rebuild
    post-treatment scores for evaluation.
    """

    sample_ids: tuple
    feature_ids: tuple
    features: np.ndarray
    target: np.ndarray
    baseline: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        X = _frozen(self.features)
        y = _frozen(self.target)
        if X.ndim != 2:
            raise TooFewSamples(f"features must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if n < 2:
            raise TooFewSamples(f"need at least 2 samples, got {n}")
        if p < 1:
            raise TooFewSamples("need at least 1 feature")
        if y.shape != (n,):
            raise ValueError(f"target has shape {y.shape}, expected ({n},)")
        if len(self.sample_ids) != n:
            raise ValueError(f"{len(self.sample_ids)} sample ids for {n} rows")
        if len(self.feature_ids) != p:
            raise ValueError(f"{len(self.feature_ids)} feature ids for {p} columns")
        _check_unique(self.sample_ids)
        _check_unique(self.feature_ids)
        _check_finite(X, "features")
        _check_finite(y, "target")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "target", y)
        if self.baseline is not None:
            b = _frozen(self.baseline)
            if b.shape != (n,):
                raise ValueError(f"baseline has shape {b.shape}, expected ({n},)")
            _check_finite(b, "baseline")
            object.__setattr__(self, "baseline", b)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        """Rows ``rows`` of this dataset, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            sample_ids=[self.sample_ids[i] for i in rows],
            feature_ids=self.feature_ids,
            features=self.features[rows],
            target=self.target[rows],
            baseline=None if self.baseline is None else self.baseline[rows],
            metadata=self.metadata,
        )

    def with_target(self, target) -> "Dataset":
        return Dataset(self.sample_ids, self.feature_ids, self.features, target, self.baseline, self.metadata)

    def select_features(self, columns) -> "Dataset":
        columns = list(columns)
        return Dataset(
            self.sample_ids,
            [self.feature_ids[j] for j in columns],
            self.features[:, columns],
            self.target,
            self.baseline,
            self.metadata,
        )


def _check_unique(ids):
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(i)
        seen.add(i)


def _check_finite(a, name):
    bad = np.argwhere(~np.isfinite(a))
    if len(bad):
        raise NonFiniteValue(f"{name}{tuple(int(v) for v in bad[0])}")


def _parse_cell(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise NonNumericCell(row, col, text) from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"row {row}, column {col!r}")
    return value


def read_table(path, id_column: Optional[str] = None, numeric_columns=None, skip=()):
    """Parse a headered CSV into ``(ids, names, matrix)``.

    Columns in ``skip`` are ignored; ``numeric_columns`` (default: every
    remaining non-id column, in header order) must parse as finite reals.
    Rows are numbered from 1 (the first data row) in error messages.
    Without an id column, sample ids are ``"0"``, ``"1"``...
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TooFewSamples(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if len(set(header)) != len(header):
        raise DuplicateId(next(h for h in header if header.count(h) > 1))
    if id_column is not None and id_column not in header:
        raise MissingColumn(id_column)
    if numeric_columns is None:
        numeric_columns = [h for h in header if h != id_column and h not in skip]
    for col in numeric_columns:
        if col not in header:
            raise MissingColumn(col)
    pos = [header.index(c) for c in numeric_columns]
    i_col = header.index(id_column) if id_column is not None else None
    M = np.empty((len(rows), len(pos)))
    ids = []
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise NonNumericCell(r, "<row>", ",".join(row))
        for k, j in enumerate(pos):
            M[r - 1, k] = _parse_cell(row[j], r, header[j])
        ids.append(row[i_col].strip() if i_col is not None else str(r - 1))
    _check_unique(ids)
    return ids, list(numeric_columns), M


def load_csv(path, target_column: str, baseline_column: Optional[str] = None,
             id_column: Optional[str] = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Every column other than the target, baseline and id columns becomes a
    feature, in header order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    for col in (target_column, baseline_column, id_column):
        if col is not None and col not in header:
            raise MissingColumn(col)
    special = {target_column, baseline_column, id_column} - {None}
    feats = [h for h in header if h not in special]
    wanted = feats + [target_column] + ([baseline_column] if baseline_column is not None else [])
    ids, _, M = read_table(path, id_column, wanted)
    if len(ids) < 2:
        raise TooFewSamples(f"need at least 2 samples, got {len(ids)}")
    p = len(feats)
    base = M[:, p + 1] if baseline_column is not None else None
    return Dataset(ids, feats, M[:, :p], M[:, p], base)


def format_float(x: float) -> str:
    """Shortest text that parses back to exactly ``x``."""
    return repr(float(x))


def write_csv(data: Dataset, path, target_column="target", baseline_column="baseline",
              id_column="id"):
    """Write ``data`` so that :func:`load_csv` with the same names reads it back exactly."""
    header = [id_column, *data.feature_ids, target_column]
    if data.baseline is not None:
        header.append(baseline_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [data.sample_ids[i], *map(format_float, data.features[i]), format_float(data.target[i])]
            if data.baseline is not None:
                row.append(format_float(data.baseline[i]))
            w.writerow(row)


def ols_line(x, y):
    """Intercept and slope of the least-squares line of ``y`` on ``x``.

    Returns ``None`` when ``x`` has no spread.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-12 * max(1.0, float(x @ x)):
        return None
    slope = float(xc @ (y - y.mean())) / sxx
    return float(y.mean()) - slope * float(x.mean()), slope


def make_target(post_score, pre_score, mode: str = RESIDUALIZED_CHANGE) -> np.ndarray:
    """Treatment-response target from pre/post scores.

    ``raw_change`` is ``post - pre``. ``residualized_change`` removes the
    part of the change that is linear in the pre score.
    """
    post = np.asarray(post_score, dtype=np.float64)
    pre = np.asarray(pre_score, dtype=np.float64)
    if post.shape != pre.shape or post.ndim != 1:
        raise ValueError("post and pre scores must be 1-D vectors of equal length")
    change = post - pre
    if mode == RAW_CHANGE:
        return change
    if mode != RESIDUALIZED_CHANGE:
        raise ValueError(f"unknown target mode {mode!r}")
    if len(pre) < 3:
        raise TooFewSamples("residualized change needs at least 3 samples")
    line = ols_line(pre, change)
    if line is None:
        raise DegenerateBaseline("all baseline values are equal")
    a, b = line
    return change - (a + b * pre)


def standardize_target(y):
    """Return ``(z, mean, sd)`` with ``z = (y - mean) / sd`` and sd using ``n - 1``."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise TooFewSamples("standardization needs at least 2 values")
    mean = float(y.mean())
    sd = float(y.std(ddof=1))
    if not sd > 0:
        raise ZeroVariance("target has zero variance")
    return (y - mean) / sd, mean, sd


@dataclass(frozen=True)
class TargetTransform:
    """Target transform fitted on training data and replayed on new samples.

    ``trend_intercept``/``trend_slope`` describe the baseline trend removed
    in residualized mode (``0``/``0`` otherwise); ``mean``/``sd`` the
    standardization (``0``/``1`` when off).
    """

    mode: str = RAW_CHANGE
    standardize: bool = False
    trend_intercept: float = 0.0
    trend_slope: float = 0.0
    mean: float = 0.0
    sd: float = 1.0

    @classmethod
    def fit(cls, target, baseline=None, mode=RESIDUALIZED_CHANGE, standardize=True):
        target = np.asarray(target, dtype=np.float64)
        a = b = 0.0
        if mode == RESIDUALIZED_CHANGE and baseline is not None:
            baseline = np.asarray(baseline, dtype=np.float64)
            if len(target) < 3:
                raise TooFewSamples("residualized change needs at least 3 samples")
            line = ols_line(baseline, target)
            if line is None:
                raise DegenerateBaseline("all baseline values are equal")
            a, b = line
        else:
            mode = RAW_CHANGE
        resid = target - (a + b * baseline) if mode == RESIDUALIZED_CHANGE else target
        mean, sd = 0.0, 1.0
        if standardize:
            _, mean, sd = standardize_target(resid)
        return cls(mode, bool(standardize), a, b, mean, sd)

    def to_target_space(self, change, baseline=None):
        """Raw change -> modelled target (residualized, not standardized)."""
        change = np.asarray(change, dtype=np.float64)
        if self.mode == RESIDUALIZED_CHANGE:
            if baseline is None:
                raise ValueError("residualized target needs the baseline score")
            return change - (self.trend_intercept + self.trend_slope * np.asarray(baseline, dtype=np.float64))
        return change

    def to_model_space(self, change, baseline=None):
        return (self.to_target_space(change, baseline) - self.mean) / self.sd

    def from_model_space(self, z):
        return np.asarray(z, dtype=np.float64) * self.sd + self.mean

    def to_change(self, target, baseline=None):
        target = np.asarray(target, dtype=np.float64)
        if self.mode == RESIDUALIZED_CHANGE:
            if baseline is None:
                raise ValueError("residualized target needs the baseline score")
            return target + self.trend_intercept + self.trend_slope * np.asarray(baseline, dtype=np.float64)
        return target

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-signal regression dataset.

    The first ``k_informative`` features carry the signal. With
    ``baseline_mean`` set, a pre-treatment score is drawn as well and the
    target is read as the change from it.
    """

    n: int
    p: int
    k_informative: int
    coefficients: tuple
    noise_sd: float = 1.0
    correlation_rho: float = 0.0
    seed: int = 0
    baseline_mean: Optional[float] = None
    baseline_sd: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    def validate(self):
        if self.n < 2 or self.p < 1:
            raise InvalidSpec(f"need n >= 2 and p >= 1 (got n={self.n}, p={self.p})")
        if not 0 <= self.k_informative <= self.p:
            raise InvalidSpec(f"k_informative={self.k_informative} must lie in [0, p={self.p}]")
        if len(self.coefficients) != self.k_informative:
            raise InvalidSpec(f"{len(self.coefficients)} coefficients for k_informative={self.k_informative}")
        if not (self.noise_sd >= 0 and math.isfinite(self.noise_sd)):
            raise InvalidSpec("noise_sd must be finite and >= 0")
        if not 0 <= self.correlation_rho < 1:
            raise InvalidSpec("correlation_rho must lie in [0, 1)")
        if self.seed < 0:
            raise InvalidSpec("seed must be non-negative")
        if self.baseline_sd < 0:
            raise InvalidSpec("baseline_sd must be >= 0")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw an equicorrelated Gaussian design with a sparse linear target."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    shared = rng.standard_normal((spec.n, 1))
    own = rng.standard_normal((spec.n, spec.p))
    rho = spec.correlation_rho
    X = own if rho == 0 else math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own
    noise = rng.standard_normal(spec.n)
    y = X[:, : spec.k_informative] @ np.asarray(spec.coefficients, dtype=np.float64)
    if spec.noise_sd > 0:
        y = y + spec.noise_sd * noise
    baseline = None
    if spec.baseline_mean is not None:
        baseline = spec.baseline_mean + spec.baseline_sd * rng.standard_normal(spec.n)
    width = len(str(spec.p - 1))
    meta = {"informative": list(range(spec.k_informative)), "spec": asdict(spec)}
    meta["spec"]["coefficients"] = list(spec.coefficients)
    return Dataset(
        sample_ids=[f"s{i:0{len(str(spec.n - 1))}d}" for i in range(spec.n)],
        feature_ids=[f"f{j:0{width}d}" for j in range(spec.p)],
        features=X,
        target=y,
        baseline=baseline,
        metadata=meta,
    )


def write_synthetic(data: Dataset, csv_path) -> Path:
    """Write a generated dataset and its JSON ground-truth sidecar; return the sidecar path."""
    csv_path = Path(csv_path)
    write_csv(data, csv_path)
    sidecar = csv_path.with_suffix(".truth.json")
    meta = dict(data.metadata)
    meta["informative_ids"] = [data.feature_ids[j] for j in meta.get("informative", [])]
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return sidecar


def spec_from_sequence(n, p, k, coefficients: Sequence[float] | None = None, **kw) -> SyntheticSpec:
    """Convenience constructor; missing coefficients default to all ones."""
    if coefficients is None:
        coefficients = [1.0] * k
    return SyntheticSpec(n=n, p=p, k_informative=k, coefficients=tuple(coefficients), **kw)
