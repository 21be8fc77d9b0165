"""Pairwise feature dissimilarities and precision-weighted fusion."""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial.distance import pdist, squareform

from .dataio import FeatureTable
from .errors import DataError, DisconnectedGraphError, NumericalError

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Symmetric nonnegative p x p dissimilarity matrix with feature labels."""

    labels: list[str]
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DataError("distance matrix must be square")
        if len(self.labels) != d.shape[0]:
            raise DataError("label count does not match matrix size")
        if not np.isfinite(d).all():
            raise DataError("distance matrix contains NaN or Inf")
        if np.abs(d - d.T).max(initial=0.0) > 1e-9:
            raise DataError("distance matrix is not symmetric")
        if not np.array_equal(d, d.T):
            d = (d + d.T) / 2.0
        if np.abs(np.diag(d)).max(initial=0.0) > 1e-9:
            raise DataError("distance matrix diagonal is not zero")
        d = d.copy()
        np.fill_diagonal(d, 0.0)
        if (d < 0).any():
            raise DataError("distance matrix has negative entries")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def p(self) -> int:
        return self.d.shape[0]

    def condensed(self) -> np.ndarray:
        """Upper-triangle entries in scipy condensed order."""
        iu = np.triu_indices(self.p, 1)
        return self.d[iu]

    def equals(self, other: "DistanceMatrix") -> bool:
        return self.labels == other.labels and np.array_equal(self.d, other.d)


@dataclass(frozen=True)
class PrecisionWeights:
    """Per-metric variances; fusion weights are their reciprocals."""

    sigma2: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma2, dtype=float)
        if (s <= 0).any() or not np.isfinite(s).all():
            raise DataError("sigma2 entries must be positive and finite")
        s.setflags(write=False)
        object.__setattr__(self, "sigma2", s)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.sigma2


@dataclass(frozen=True, eq=False)
class FusedDistance:
    d_bar: DistanceMatrix
    weights: PrecisionWeights
    mode: str


@dataclass(frozen=True, eq=False)
class PrecisionFit:
    """Result of the precision fixed point: weights, fused matrix, trace."""

    weights: PrecisionWeights
    fused: FusedDistance
    objective_trace: np.ndarray
    iterations: int
    scales: np.ndarray


def pairwise_euclidean(t: FeatureTable, over: str = "features") -> DistanceMatrix:
    """Euclidean distances between feature columns (each a length-n vector)."""
    if over != "features":
        raise DataError(f"unsupported axis {over!r}")
    if t.has_missing():
        raise DataError("distances require a cleaned table")
    if t.p < 2:
        raise DataError("need at least two features")
    return DistanceMatrix(list(t.feature_names), squareform(pdist(t.values.T)))


def knn_union_mask(d: DistanceMatrix, k: int) -> np.ndarray:
    """Boolean adjacency of the symmetrized (union) k-nearest-neighbor graph."""
    p = d.p
    if k < 1 or k >= p:
        raise DataError(f"neighbor count k={k} must satisfy 1 <= k < p={p}")
    order = np.argsort(d.d, axis=1, kind="stable")
    mask = np.zeros((p, p), dtype=bool)
    for i in range(p):
        neighbors = [j for j in order[i] if j != i][:k]
        mask[i, neighbors] = True
    return mask | mask.T


def _check_connected(mask: np.ndarray) -> None:
    n_comp, labels = connected_components(coo_matrix(mask), directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels).tolist()
        raise DisconnectedGraphError(sizes)


def geodesic_distances(d: DistanceMatrix, k: int) -> DistanceMatrix:
    """All-pairs shortest paths over the union k-NN graph of ``d``."""
    mask = knn_union_mask(d, k)
    _check_connected(mask)
    rows, cols = np.nonzero(mask)
    # explicit zero-weight edges (duplicate features) must stay stored
    graph = coo_matrix((d.d[rows, cols], (rows, cols)), shape=d.d.shape).tocsr()
    geo = shortest_path(graph, method="D", directed=False)
    if not np.isfinite(geo).all():  # pragma: no cover - guarded by _check_connected
        raise DisconnectedGraphError([d.p])
    geo = np.minimum(geo, geo.T)
    np.fill_diagonal(geo, 0.0)
    return DistanceMatrix(list(d.labels), geo)


def embedding_distances(e) -> DistanceMatrix:
    """Pairwise Euclidean distances of 2D embedding coordinates."""
    return DistanceMatrix(list(e.labels), squareform(pdist(e.coords)))


def _check_same_labels(ds) -> None:
    labels = ds[0].labels
    for m in ds[1:]:
        if m.labels != labels:
            raise DataError("distance matrices have mismatched labels")


def fuse_distances(ds: list[DistanceMatrix], w: PrecisionWeights, mode: str) -> FusedDistance:
    """Weighted arithmetic or geometric mean of distance matrices.

    Identical inputs are returned unchanged; otherwise the weighted mean is
    clipped into the entrywise [min, max] envelope of the inputs, which the
    exact mean satisfies but floating-point rounding may not.
    """
    if mode not in ("arithmetic", "geometric"):
        raise DataError(f"unknown fusion mode {mode!r}")
    if len(ds) < 1:
        raise DataError("need at least one distance matrix")
    _check_same_labels(ds)
    if len(w.sigma2) != len(ds):
        raise DataError("weight count does not match matrix count")

    if all(m.equals(ds[0]) for m in ds[1:]):
        return FusedDistance(ds[0], w, mode)

    stack = np.array([m.d for m in ds])
    omega = w.weights / w.weights.sum()
    if mode == "arithmetic":
        fused = np.tensordot(omega, stack, axes=1)
    else:
        off = ~np.eye(stack.shape[1], dtype=bool)
        if (stack[:, off] <= 0).any():
            raise NumericalError("geometric fusion requires positive off-diagonal distances")
        work = stack.copy()
        work[:, np.eye(stack.shape[1], dtype=bool)] = 1.0
        fused = np.exp(np.tensordot(omega, np.log(work), axes=1))
    fused = np.clip(fused, stack.min(axis=0), stack.max(axis=0))
    fused = (fused + fused.T) / 2.0
    np.fill_diagonal(fused, 0.0)
    return FusedDistance(DistanceMatrix(list(ds[0].labels), fused), w, mode)


def estimate_precisions(
    ds: list[DistanceMatrix],
    mode: str = "arithmetic",
    max_iter: int = 200,
    tol: float = 1e-10,
    rescale: bool = True,
) -> PrecisionFit:
    """Fixed-point estimate of per-metric variances and the fused matrix.

    Alternates the weighted-mean consensus update with the method-of-moments
    variance update until the variances stabilize. With ``rescale`` each
    input is divided by its mean off-diagonal entry before estimation so no
    metric dominates through scale alone; the reported sigma2 are the
    dimensionless variances of those scale-aligned residuals. The fused
    matrix is always the weighted mean of the original inputs, so it equals
    the closed-form formula under the returned weights, stays inside the
    entrywise input envelope, and scales linearly with the inputs.
    """
    if mode not in ("arithmetic", "geometric"):
        raise DataError(f"unknown fusion mode {mode!r}")
    if len(ds) < 2:
        raise DataError("precision estimation needs at least two metrics")
    _check_same_labels(ds)
    p = ds[0].p
    iu = np.triu_indices(p, 1)
    X = np.array([m.d[iu] for m in ds])  # (A, m)
    A, m = X.shape
    if mode == "geometric" and (X <= 0).any():
        raise NumericalError("geometric fusion requires positive off-diagonal distances")

    scales = X.mean(axis=1) if rescale else np.ones(A)
    if (scales <= 0).any():
        raise NumericalError("a distance matrix has zero mean off-diagonal entry")
    Y = X / scales[:, None]
    if mode == "geometric":
        Y = np.log(Y)

    sigma2 = np.ones(A)
    clamped = False
    trace = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        wts = 1.0 / sigma2
        delta = wts @ Y / wts.sum()
        resid2 = ((Y - delta) ** 2).mean(axis=1)
        new_sigma2 = np.maximum(resid2, SIGMA2_FLOOR)
        clamped = clamped or (resid2 < SIGMA2_FLOOR).any()
        trace.append(float(m * (resid2 / new_sigma2 + np.log(new_sigma2)).sum()))
        shift = np.abs(new_sigma2 - sigma2).max()
        sigma2 = new_sigma2
        if shift < tol:
            break
    if clamped:
        warnings.warn(f"metric variance clamped at {SIGMA2_FLOOR:g} (duplicate of the consensus)")

    weights = PrecisionWeights(sigma2)
    fused = fuse_distances(ds, weights, mode)
    return PrecisionFit(weights, fused, np.array(trace), iterations, scales)


# --- serialization ---------------------------------------------------------


def save_distance_csv(d: DistanceMatrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(d.labels)
        for row in d.d:
            writer.writerow([format(v, ".17g") for v in row])


def load_distance_csv(path) -> DistanceMatrix:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    labels = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return DistanceMatrix(labels, data)


def save_distance_binary(d: DistanceMatrix, path) -> None:
    """p (int64 LE), label-block length (int64 LE), UTF-8 JSON label list,
    then p*p row-major float64 LE."""
    blob = json.dumps(d.labels).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<q", d.p))
        fh.write(struct.pack("<q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(d.d, dtype="<f8").tobytes())


def load_distance_binary(path) -> DistanceMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataError(f"{path} is not a distance matrix dump")
    p, nbytes = struct.unpack_from("<qq", raw)
    labels = json.loads(raw[16 : 16 + nbytes].decode("utf-8"))
    data = np.frombuffer(raw, dtype="<f8", offset=16 + nbytes).reshape(p, p)
    return DistanceMatrix(labels, data.astype(float))
