"""Prediction metrics, bootstrap model comparison, gap-statistic cluster
tests, and distance-distribution diagnostics."""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .distances import DistanceMatrix
from .ensemble import PredictionSet
from .errors import DataError, NumericalError

METRICS = ("nrmse", "nmae", "pcc", "bias")
# direction of improvement per metric
LOWER_IS_BETTER = {"nrmse": True, "nmae": True, "pcc": False, "bias": True}


@dataclass(frozen=True)
class MetricReport:
    nrmse: float
    nmae: float
    pcc: float
    bias: float
    n_test: int
    ybar_ref: float

    def as_dict(self) -> dict:
        return {
            "nrmse": self.nrmse,
            "nmae": self.nmae,
            "pcc": self.pcc,
            "bias": self.bias,
            "n_test": self.n_test,
            "ybar_ref": self.ybar_ref,
        }

    def value(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass(frozen=True, eq=False)
class BootstrapSummary:
    """Replicate metric vectors with percentile confidence intervals."""

    replicates: dict
    ci95: dict
    seed: int
    B: int
    index_hashes: list

    def as_dict(self, include_replicates: bool = False) -> dict:
        out = {
            "B": self.B,
            "seed": self.seed,
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "mean": {k: float(np.mean(v)) for k, v in self.replicates.items()},
        }
        if include_replicates:
            out["replicates"] = {k: v.tolist() for k, v in self.replicates.items()}
        return out


@dataclass(frozen=True, eq=False)
class GapResult:
    ks: list
    gap: np.ndarray
    sk: np.ndarray
    log_wk: np.ndarray
    chosen_k: int
    cluster_overlap: float | None

    def as_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "gap": self.gap.tolist(),
            "sk": self.sk.tolist(),
            "log_wk": self.log_wk.tolist(),
            "chosen_k": self.chosen_k,
            "cluster_overlap": self.cluster_overlap,
        }


@dataclass(frozen=True, eq=False)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def score(y, yhat, ybar_ref: float) -> MetricReport:
    """NRMSE and NMAE against the reference-mean predictor, Pearson
    correlation, and the residual-regression bias angle arctan(|slope|)."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DataError("y and yhat must be equal-length vectors")
    if len(y) < 2:
        raise DataError("need at least two test points")
    denom_sq = float(((y - ybar_ref) ** 2).sum())
    denom_abs = float(np.abs(y - ybar_ref).sum())
    if denom_sq == 0 or denom_abs == 0:
        raise NumericalError("reference-mean denominator is zero")
    if np.var(y) == 0:
        raise NumericalError("test responses have zero variance")
    nrmse = float(np.sqrt(((y - yhat) ** 2).sum() / denom_sq))
    nmae = float(np.abs(y - yhat).sum() / denom_abs)

    var_hat = float(np.var(yhat))
    if var_hat == 0:
        warnings.warn("constant predictions: PCC reported as 0")
        pcc = 0.0
        slope = 0.0
    else:
        pcc = float(np.corrcoef(y, yhat)[0, 1])
        resid = y - yhat
        slope = float(np.cov(yhat, resid, ddof=0)[0, 1] / var_hat)
    bias = float(np.arctan(abs(slope)))
    return MetricReport(nrmse, nmae, pcc, bias, len(y), float(ybar_ref))


def jackknife_bootstrap_ci(replicates, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval with numpy's linear-interpolation quantiles
    (quantile q sits at fractional order statistic (B-1)*q)."""
    replicates = np.asarray(replicates, dtype=float)
    if len(replicates) < 100:
        raise DataError("need at least 100 replicates for an interval")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(replicates, [tail, 1.0 - tail], method="linear")
    return float(lo), float(hi)


def bootstrap_metrics(y, yhat_per_model: PredictionSet, ybar_ref: float, B: int = 10000, seed: int = 0) -> dict:
    """B paired resamples of (y, yhat) scored per model.

    Every model sees the same resample indices in a given replicate; each
    replicate draws from its own (seed, replicate) RNG stream, and a
    degenerate resample (zero variance) is redrawn up to 10 times.
    """
    y = np.asarray(y, dtype=float)
    if B < 100:
        raise DataError("need at least 100 bootstrap replicates")
    if len(y) != yhat_per_model.n:
        raise DataError("y length does not match predictions")
    n = len(y)
    tags = yhat_per_model.model_tags
    values = {tag: {m: np.empty(B) for m in METRICS} for tag in tags}
    hashes = []
    for r in range(B):
        rng = np.random.default_rng((seed, r))
        for attempt in range(10):
            idx = rng.integers(0, n, size=n)
            try:
                reports = {
                    tag: score(y[idx], yhat_per_model.column(tag)[idx], ybar_ref)
                    for tag in tags
                }
            except NumericalError:
                continue
            break
        else:
            raise NumericalError(f"replicate {r} degenerate after 10 redraws")
        hashes.append(format(zlib.crc32(idx.astype("<i8").tobytes()), "08x"))
        for tag in tags:
            for m in METRICS:
                values[tag][m][r] = reports[tag].value(m)
    out = {}
    for tag in tags:
        ci = {m: jackknife_bootstrap_ci(values[tag][m]) for m in METRICS}
        out[tag] = BootstrapSummary(values[tag], ci, seed, B, list(hashes))
    return out


def null_model_predictions(y_train, y_test_size: int, seed: int = 0) -> np.ndarray:
    """Draw test predictions uniformly with replacement from the training
    response distribution."""
    y_train = np.asarray(y_train, dtype=float)
    if len(y_train) == 0:
        raise DataError("training responses are empty")
    rng = np.random.default_rng(seed)
    return rng.choice(y_train, size=y_test_size, replace=True)


def robustness_wins(a: BootstrapSummary, b: BootstrapSummary, metric: str, direction: str | None = None) -> float:
    """Fraction of paired replicates where model a strictly beats model b."""
    if metric not in METRICS:
        raise DataError(f"unknown metric {metric!r}")
    if a.B != b.B:
        raise DataError("bootstrap summaries have different replicate counts")
    if direction is None:
        direction = "lower" if LOWER_IS_BETTER[metric] else "higher"
    if direction not in ("lower", "higher"):
        raise DataError(f"unknown direction {direction!r}")
    va, vb = a.replicates[metric], b.replicates[metric]
    wins = (va < vb) if direction == "lower" else (va > vb)
    return float(wins.mean())


def kmeans(points, k: int, seed=0, restarts: int = 3, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    An emptied cluster is re-seeded at the point farthest from its centroid.
    Deterministic for a fixed seed.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    distinct = np.unique(points, axis=0).shape[0]
    if k < 1:
        raise DataError("k must be at least 1")
    if k > distinct:
        raise DataError(f"k={k} exceeds the {distinct} distinct points")

    best = None
    for r in range(restarts):
        rng = np.random.default_rng((*np.atleast_1d(seed).tolist(), r))
        centroids = _kmeanspp(points, k, rng)
        labels = np.zeros(n, dtype=int)
        for _ in range(max_iter):
            d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            new_labels = d2.argmin(axis=1)
            for c in range(k):
                members = new_labels == c
                if members.any():
                    centroids[c] = points[members].mean(axis=0)
                else:
                    far = int(d2.min(axis=1).argmax())
                    centroids[c] = points[far]
                    new_labels[far] = c
            if (new_labels == labels).all():
                labels = new_labels
                break
            labels = new_labels
        d2 = ((points - centroids[labels]) ** 2).sum(axis=1)
        inertia = float(d2.sum())
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centroids.copy(), inertia)
    return best


def _kmeanspp(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    for c in range(1, k):
        d2 = ((points[:, None, :] - centroids[None, :c, :]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total == 0:
            centroids[c] = points[int(rng.integers(n))]
        else:
            centroids[c] = points[rng.choice(n, p=d2 / total)]
    return centroids


def _within_dispersion(points: np.ndarray, k: int, seed, restarts: int) -> float:
    if k == 1:
        mu = points.mean(axis=0)
        return float(((points - mu) ** 2).sum())
    return kmeans(points, k, seed=seed, restarts=restarts).inertia


def gap_statistic(
    points,
    kmax: int = 5,
    b_ref: int = 10,
    seed: int = 0,
    sources=None,
    restarts: int = 3,
) -> GapResult:
    """Estimate the cluster count by comparing log within-cluster dispersion
    to uniform reference draws over the bounding box.

    chosen_k is the smallest k with Gap(k) >= Gap(k+1) - s_(k+1). With
    ``sources`` given (candidate/null origin per point) and chosen_k >= 2,
    the k=2 labeling's disagreement with the sources, minimized over the two
    label permutations, is reported as ``cluster_overlap``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if kmax < 2:
        raise DataError("kmax must be at least 2")
    if b_ref < 1:
        raise DataError("need at least one reference set")
    if np.unique(points, axis=0).shape[0] < 2:
        raise DataError("need at least two distinct points")

    ks = list(range(1, kmax + 1))
    log_wk = np.array(
        [np.log(max(_within_dispersion(points, k, (seed, 0, k), restarts), 1e-300)) for k in ks]
    )
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    ref_log = np.empty((b_ref, len(ks)))
    for b in range(b_ref):
        rng = np.random.default_rng((seed, 1000 + b))
        ref = rng.uniform(size=points.shape) * (hi - lo) + lo
        for i, k in enumerate(ks):
            ref_log[b, i] = np.log(
                max(_within_dispersion(ref, k, (seed, 2000 + b, k), restarts), 1e-300)
            )
    gap = ref_log.mean(axis=0) - log_wk
    sk = ref_log.std(axis=0) * np.sqrt(1.0 + 1.0 / b_ref)

    chosen = kmax
    for i in range(len(ks) - 1):
        if gap[i] >= gap[i + 1] - sk[i + 1]:
            chosen = ks[i]
            break

    overlap = None
    if chosen >= 2 and sources is not None:
        sources = np.asarray(sources, dtype=int)
        if len(sources) != points.shape[0]:
            raise DataError("sources length does not match points")
        labels = kmeans(points, 2, seed=(seed, 7777), restarts=restarts).labels
        mismatch = float((labels != sources).mean())
        overlap = min(mismatch, 1.0 - mismatch)
    return GapResult(ks, gap, sk, log_wk, chosen, overlap)


def kendall_tau_distances(d1: DistanceMatrix, d2: DistanceMatrix) -> float:
    """Tie-corrected Kendall tau-b over the upper-triangle entries."""
    if d1.labels != d2.labels:
        raise DataError("distance matrices have mismatched labels")
    x = d1.condensed()
    y = d2.condensed()
    if len(x) < 2:
        raise DataError("need at least two distance pairs")
    tau = stats.kendalltau(x, y).statistic
    return float(tau)


def kl_divergence_distances(
    d1: DistanceMatrix, d2: DistanceMatrix, log_scale: bool = False, bins: int = 50
) -> float:
    """KL divergence between histogram densities of the two distance
    collections, Laplace-smoothed (+1 per bin) on a shared range."""
    x = d1.condensed()
    y = d2.condensed()
    if len(x) == 0 or len(y) == 0:
        raise DataError("empty distance collection")
    if bins < 1:
        raise DataError("bins must be positive")
    if log_scale:
        if (x <= 0).any() or (y <= 0).any():
            raise NumericalError("log-scale KL requires positive distances")
        x = np.log(x)
        y = np.log(y)
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi <= lo:
        hi = lo + 1.0
    cx, _ = np.histogram(x, bins=bins, range=(lo, hi))
    cy, _ = np.histogram(y, bins=bins, range=(lo, hi))
    px = (cx + 1.0) / (cx + 1.0).sum()
    py = (cy + 1.0) / (cy + 1.0).sum()
    return float((px * np.log(px / py)).sum())
