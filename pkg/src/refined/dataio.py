"""Feature-table ingestion, cleaning, normalization, and deterministic splits."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DuplicateFeatureError, EmptyTableError

# Cell contents treated as missing (besides anything that parses to NaN).
MISSING_CODES = {"", "NA", "NaN"}

MIN_SAMPLES = 3
MIN_FEATURES = 4


@dataclass(frozen=True)
class FeatureTable:
    """n samples by p features plus a scalar response per sample.

    ``values`` may contain NaN (missing) before cleaning; Inf is never
    allowed. Feature names must be unique and ``p >= 4``, ``n >= 3``.
    """

    sample_ids: list[str]
    feature_names: list[str]
    values: np.ndarray
    response: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        response = np.asarray(self.response, dtype=float)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "response", response)
        n, p = values.shape
        if len(self.sample_ids) != n or len(response) != n:
            raise DataError("sample ids, values, and response lengths disagree")
        if len(self.feature_names) != p:
            raise DataError("feature name count does not match value columns")
        if len(set(self.feature_names)) != p:
            dups = sorted({f for f in self.feature_names if self.feature_names.count(f) > 1})
            raise DuplicateFeatureError(f"duplicate feature names: {', '.join(dups)}")
        if n < MIN_SAMPLES:
            raise DataError(f"need at least {MIN_SAMPLES} samples, got {n}")
        if p < MIN_FEATURES:
            raise DataError(f"need at least {MIN_FEATURES} features, got {p}")
        if np.isinf(values).any():
            raise DataError("feature values contain Inf")
        if not np.isfinite(response).all():
            raise DataError("response contains NaN or Inf")
        values.setflags(write=False)
        response.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())


@dataclass(frozen=True)
class SplitIndex:
    """Disjoint train/validation/test sample indices from a seeded shuffle."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            arr = np.asarray(getattr(self, name), dtype=int)
            object.__setattr__(self, name, arr)
        parts = [self.train, self.validation, self.test]
        total = np.concatenate(parts)
        if len(np.unique(total)) != len(total):
            raise DataError("split partitions overlap")
        if sorted(total.tolist()) != list(range(len(total))):
            raise DataError("split partitions do not cover 0..n-1")

    @property
    def n(self) -> int:
        return len(self.train) + len(self.validation) + len(self.test)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitIndex":
        payload = json.loads(text)
        return cls(
            train=np.asarray(payload["train"], dtype=int),
            validation=np.asarray(payload["validation"], dtype=int),
            test=np.asarray(payload["test"], dtype=int),
            seed=int(payload["seed"]),
        )


@dataclass(frozen=True)
class NormalizationParams:
    """Per-feature affine map (x - loc) / scale fitted on a chosen row set."""

    mode: str
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "loc", np.asarray(self.loc, dtype=float))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if (self.scale <= 0).any():
            raise DataError("normalization scale must be positive")


def _parse_cell(text: str, row: int, col: str) -> float:
    token = text.strip()
    if token in MISSING_CODES:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise DataError(
            f"non-numeric value {token!r} at row {row}, column {col!r}"
        ) from None
    if math.isinf(value):
        raise DataError(f"infinite value at row {row}, column {col!r}")
    return value


def load_feature_table(path, response_column: str, delimiter: str = ",") -> FeatureTable:
    """Read a delimited table: header row, first column sample id.

    Empty cells, ``NA``, ``NaN`` (and anything parsing to NaN) are kept as
    missing feature values for :func:`clean_samples`. Missing responses are
    an error.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise DataError(f"{path} has no data columns")
    columns = header[1:]
    if len(set(columns)) != len(columns):
        dups = sorted({c for c in columns if columns.count(c) > 1})
        raise DuplicateFeatureError(f"duplicate feature names: {', '.join(dups)}")
    if response_column not in columns:
        raise DataError(f"response column {response_column!r} not found in {path}")
    resp_idx = columns.index(response_column)
    feature_names = [c for c in columns if c != response_column]

    sample_ids: list[str] = []
    values: list[list[float]] = []
    response: list[float] = []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"row {r} has {len(row)} fields, expected {len(header)}")
        sample_ids.append(row[0].strip())
        cells = [_parse_cell(c, r, columns[i]) for i, c in enumerate(row[1:])]
        y = cells.pop(resp_idx)
        if math.isnan(y):
            raise DataError(f"missing response for sample {row[0].strip()!r} (row {r})")
        response.append(y)
        values.append(cells)

    return FeatureTable(sample_ids, feature_names, np.array(values), np.array(response))


def clean_samples(t: FeatureTable, threshold: float = 0.10) -> FeatureTable:
    """Drop samples whose zero-or-missing fraction strictly exceeds threshold.

    Remaining missing entries are imputed with the per-feature median over
    the retained samples.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError("threshold must lie in [0, 1]")
    missing = np.isnan(t.values)
    bad = missing | (t.values == 0.0)
    frac = bad.sum(axis=1) / t.p
    keep = frac <= threshold
    if not keep.any():
        raise EmptyTableError(
            f"all {t.n} samples exceed the {threshold:.0%} zero-or-missing threshold"
        )
    values = t.values[keep].copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        medians = np.nanmedian(values, axis=0)
    if np.isnan(medians).any():
        empty = [t.feature_names[j] for j in np.flatnonzero(np.isnan(medians))]
        warnings.warn(
            f"features entirely missing after cleaning, imputed with 0: {', '.join(empty)}"
        )
        medians = np.nan_to_num(medians, nan=0.0)
    holes = np.isnan(values)
    if holes.any():
        values[holes] = np.broadcast_to(medians, values.shape)[holes]
    return FeatureTable(
        [s for s, k in zip(t.sample_ids, keep) if k],
        list(t.feature_names),
        values,
        t.response[keep],
    )


def fit_normalization(t: FeatureTable, mode: str = "minmax01", rows=None) -> NormalizationParams:
    """Fit per-feature normalization on ``rows`` (default: all samples)."""
    if t.has_missing():
        raise DataError("normalize requires a cleaned table (no missing values)")
    sub = t.values if rows is None else t.values[np.asarray(rows, dtype=int)]
    if sub.shape[0] == 0:
        raise DataError("cannot fit normalization on an empty row set")
    if mode == "minmax01":
        lo = sub.min(axis=0)
        hi = sub.max(axis=0)
        scale = hi - lo
        const = scale == 0
        if const.any():
            names = [t.feature_names[j] for j in np.flatnonzero(const)]
            warnings.warn(f"constant features mapped to 0.5: {', '.join(names)}")
        # constant feature: scale 1 and loc = value - 0.5 sends it to 0.5
        loc = np.where(const, lo - 0.5, lo)
        scale = np.where(const, 1.0, scale)
    elif mode == "zscore":
        loc = sub.mean(axis=0)
        scale = sub.std(axis=0)  # population sd
        const = scale == 0
        if const.any():
            names = [t.feature_names[j] for j in np.flatnonzero(const)]
            warnings.warn(f"constant features mapped to 0 under zscore: {', '.join(names)}")
        scale = np.where(const, 1.0, scale)
    else:
        raise DataError(f"unknown normalization mode {mode!r}")
    return NormalizationParams(mode, loc, scale)


def apply_normalization(t: FeatureTable, params: NormalizationParams, clip: bool = False) -> FeatureTable:
    """Apply fitted params; ``clip`` clamps minmax01 output into [0, 1]."""
    values = (t.values - params.loc) / params.scale
    if clip and params.mode == "minmax01":
        values = np.clip(values, 0.0, 1.0)
    return FeatureTable(list(t.sample_ids), list(t.feature_names), values, t.response)


def denormalize(t: FeatureTable, params: NormalizationParams) -> FeatureTable:
    values = t.values * params.scale + params.loc
    return FeatureTable(list(t.sample_ids), list(t.feature_names), values, t.response)


def normalize_features(
    t: FeatureTable, mode: str = "minmax01", fit_rows=None, clip: bool = False
) -> tuple[FeatureTable, NormalizationParams]:
    """Fit on ``fit_rows`` (all rows when None) and apply to the whole table."""
    params = fit_normalization(t, mode, rows=fit_rows)
    return apply_normalization(t, params, clip=clip), params


def split_samples(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitIndex:
    """Seeded shuffle then contiguous partition into train/validation/test.

    Sizes come from floors of n*ratio with the remainder distributed by
    largest fractional part; empty partitions are then topped up from the
    largest one, so every partition is non-empty whenever n >= 3.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise DataError("expected three ratios (train, validation, test)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if any(r <= 0 for r in ratios):
        raise DataError("all ratios must be positive")
    if n < 3:
        raise DataError(f"cannot split {n} samples into three non-empty partitions")

    raw = np.array([n * r for r in ratios])
    sizes = np.floor(raw).astype(int)
    fracs = raw - sizes
    for _ in range(n - sizes.sum()):
        i = int(np.argmax(fracs))
        sizes[i] += 1
        fracs[i] = -1.0
    while (sizes == 0).any():
        empty = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        sizes[donor] -= 1
        sizes[empty] += 1

    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitIndex(train=perm[:a], validation=perm[a:b], test=perm[b:], seed=seed)
