"""2D embeddings of features: spectral initializers, SMACOF, and the
Metropolis-within-Gibbs sampler over locations and per-metric variances."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.spatial.distance import pdist, squareform
from scipy.special import log_ndtr

from . import instrument
from .dataio import FeatureTable
from .distances import (
    DistanceMatrix,
    PrecisionWeights,
    embedding_distances,
    geodesic_distances,
    knn_union_mask,
    pairwise_euclidean,
    _check_connected,
)
from .errors import DataError, NumericalError


@dataclass(frozen=True, eq=False)
class Embedding:
    """p feature labels with 2D coordinates and a provenance tag."""

    labels: list[str]
    coords: np.ndarray
    method_tag: str

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DataError("embedding coordinates must be p x 2")
        if coords.shape[0] != len(self.labels):
            raise DataError("embedding label count does not match coordinates")
        if not np.isfinite(coords).all():
            raise DataError("embedding coordinates contain NaN or Inf")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def p(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class SmacofResult:
    embedding: Embedding
    stress_trace: np.ndarray


@dataclass(frozen=True, eq=False)
class BmdsResult:
    embedding: Embedding
    weights: PrecisionWeights
    trace: list
    acceptance_rate: float


def _fix_signs(coords: np.ndarray) -> np.ndarray:
    """Per axis, flip so the largest-magnitude coordinate is positive."""
    out = coords.copy()
    for axis in range(out.shape[1]):
        col = out[:, axis]
        if np.abs(col).max() == 0:
            continue
        if col[int(np.argmax(np.abs(col)))] < 0:
            out[:, axis] = -col
    return out


def classical_mds(d: DistanceMatrix) -> Embedding:
    """Torgerson scaling: double-center the squared distances and keep the
    top two eigenpairs, axes scaled by the square roots of the eigenvalues."""
    p = d.p
    if p < 3:
        raise DataError("classical MDS needs at least three points")
    J = np.eye(p) - np.ones((p, p)) / p
    B = -0.5 * J @ (d.d**2) @ J
    B = (B + B.T) / 2.0
    evals, evecs = np.linalg.eigh(B)
    coords = np.zeros((p, 2))
    tol = max(evals.max(initial=0.0), 0.0) * 1e-12
    padded = 0
    for axis, i in enumerate((p - 1, p - 2)):
        if i >= 0 and evals[i] > tol:
            coords[:, axis] = evecs[:, i] * np.sqrt(evals[i])
        else:
            padded += 1
    if padded:
        warnings.warn(f"classical MDS: {padded} axis(es) padded with zeros")
    return Embedding(list(d.labels), _fix_signs(coords), "mds")


def isomap(d: DistanceMatrix, k: int) -> Embedding:
    """Classical MDS of the k-NN geodesic distances."""
    e = classical_mds(geodesic_distances(d, k))
    return Embedding(e.labels, e.coords, f"isomap(k={k})")


def lle(t: FeatureTable, k: int) -> Embedding:
    """Locally linear embedding of the feature columns.

    Reconstruction weights per point come from its k neighbors with the
    local Gram matrix ridge-regularized by 1e-3 of its trace; the embedding
    is the pair of eigenvectors of (I-W)'(I-W) above the constant one.
    """
    if t.has_missing():
        raise DataError("LLE requires a cleaned table")
    X = t.values.T  # feature columns as points
    p = X.shape[0]
    if k < 2:
        raise DataError("LLE needs k >= 2")
    if k >= p:
        raise DataError(f"LLE needs k < p, got k={k}, p={p}")
    dist = squareform(pdist(X))
    order = np.argsort(dist, axis=1, kind="stable")
    W = np.zeros((p, p))
    for j in range(p):
        ranked = [i for i in order[j] if i != j]
        # include every point tied with the k-th distance so exact
        # duplicates are treated symmetrically
        cutoff = dist[j, ranked[k - 1]]
        nbrs = np.array([i for i in ranked if dist[j, i] <= cutoff])
        kj = len(nbrs)
        Z = X[nbrs] - X[j]
        G = Z @ Z.T
        trace = np.trace(G)
        G = G + np.eye(kj) * (1e-3 * trace if trace > 0 else 1e-3)
        w = np.linalg.solve(G, np.ones(kj))
        s = w.sum()
        w = w / s if abs(s) > 1e-300 else np.full(kj, 1.0 / kj)
        W[j, nbrs] = w
    M = np.eye(p) - W
    M = M.T @ M
    M = (M + M.T) / 2.0
    evals, evecs = np.linalg.eigh(M)
    coords = evecs[:, 1:3]
    return Embedding(list(t.feature_names), _fix_signs(coords), f"lle(k={k})")


def laplacian_eigenmaps(d: DistanceMatrix, k: int, heat_sigma=None) -> Embedding:
    """Graph-Laplacian embedding of the union k-NN graph.

    Edge weights are exp(-d^2/sigma^2), or 1 with ``heat_sigma="binary"``;
    the default sigma is the median off-diagonal distance. Coordinates are
    the generalized eigenvectors (L v = lambda D v) for the 2nd and 3rd
    smallest eigenvalues.
    """
    mask = knn_union_mask(d, k)
    _check_connected(mask)
    if heat_sigma == "binary":
        W = mask.astype(float)
        tag = f"le(k={k},binary)"
    else:
        if heat_sigma is None:
            heat_sigma = float(np.median(d.condensed()))
        heat_sigma = float(heat_sigma)
        if heat_sigma <= 0:
            raise DataError("heat_sigma must be positive")
        W = np.where(mask, np.exp(-(d.d**2) / heat_sigma**2), 0.0)
        tag = f"le(k={k})"
    deg = W.sum(axis=1)
    if (deg <= 0).any():  # pragma: no cover - union k-NN guarantees degree >= 1
        raise NumericalError("isolated node in the neighbor graph")
    L = np.diag(deg) - W
    evals, evecs = scipy.linalg.eigh(L, np.diag(deg))
    coords = evecs[:, 1:3]
    return Embedding(list(d.labels), _fix_signs(coords), tag)


def normalize_to_unit_square(e: Embedding) -> Embedding:
    """Per-axis min-max map into [0,1]; a zero-range axis maps to 0.5."""
    coords = e.coords.copy()
    for axis in range(2):
        lo = coords[:, axis].min()
        hi = coords[:, axis].max()
        if hi > lo:
            coords[:, axis] = (coords[:, axis] - lo) / (hi - lo)
        else:
            coords[:, axis] = 0.5
    return Embedding(e.labels, coords, e.method_tag)


def stress(d: DistanceMatrix, coords: np.ndarray) -> float:
    """Raw stress: sum over j<k of (d_jk - delta_jk)^2."""
    return float(((d.condensed() - pdist(coords)) ** 2).sum())


def smacof_refine(
    d: DistanceMatrix, init: Embedding, max_iter: int = 500, tol: float = 1e-12
) -> SmacofResult:
    """Majorize raw stress via repeated Guttman transforms.

    The trace is non-increasing by construction: the loop stops before
    recording any numerically non-improving step.
    """
    if init.labels != d.labels:
        raise DataError("init embedding labels do not match the distance matrix")
    target = d.condensed()
    p = d.p
    X = init.coords.copy()
    jitter_rng = np.random.default_rng(0)
    trace = [float(((target - pdist(X)) ** 2).sum())]
    for _ in range(max_iter):
        D = squareform(pdist(X))
        off = ~np.eye(p, dtype=bool)
        if (D[off] == 0).any():
            X = X + jitter_rng.normal(scale=1e-9, size=X.shape)
            D = squareform(pdist(X))
        ratio = np.where(D > 0, d.d / np.where(D > 0, D, 1.0), 0.0)
        B = -ratio
        np.fill_diagonal(B, ratio.sum(axis=1))
        X_new = B @ X / p
        s_new = float(((target - pdist(X_new)) ** 2).sum())
        s_old = trace[-1]
        if not s_new < s_old:
            break
        X = X_new
        trace.append(s_new)
        if s_old > 0 and (s_old - s_new) / s_old < tol:
            break
        if s_new < 1e-30:
            break
    tag = f"smacof<{init.method_tag}>"
    return SmacofResult(Embedding(list(d.labels), X, tag), np.array(trace))


def _reflect_unit(x: np.ndarray) -> np.ndarray:
    """Fold coordinates into [0,1] by reflection at the boundaries."""
    r = np.mod(x, 2.0)
    return np.where(r > 1.0, 2.0 - r, r)


def bmds_sample(
    ds: list[DistanceMatrix],
    model: str = "log_normal",
    prior: tuple[float, float] = (3.0, 0.1),
    init: Embedding | None = None,
    iters: int = 5000,
    burn_in: int = 2000,
    step: float = 0.02,
    seed: int = 0,
) -> BmdsResult:
    """Posterior sampling of 2D locations and per-metric variances.

    Locations are uniform on the unit square a priori and move by reflected
    Gaussian random walks; variances carry independent Inverse-Gamma(alpha,
    beta) priors. Under the log-normal observation model the variance
    conditional is Inverse-Gamma and sampled exactly; under the truncated
    normal model (whose likelihood divides by Phi(delta/sigma) per pair) the
    variance moves by a Metropolis step on log sigma^2. Returns posterior
    means over the post-burn-in sweeps and the per-sweep log-posterior trace.
    """
    if model not in ("truncated_normal", "log_normal"):
        raise DataError(f"unknown observation model {model!r}")
    alpha, beta = float(prior[0]), float(prior[1])
    if alpha <= 2 or beta <= 0:
        raise DataError("prior requires alpha > 2 and beta > 0")
    if step <= 0:
        raise DataError("step must be positive")
    if iters <= burn_in:
        raise DataError("iters must exceed burn_in")
    if len(ds) < 1:
        raise DataError("need at least one distance matrix")
    labels = ds[0].labels
    for d_a in ds[1:]:
        if d_a.labels != labels:
            raise DataError("distance matrices have mismatched labels")
    p = ds[0].p
    A = len(ds)
    m = p * (p - 1) // 2
    obs = np.array([d_a.d for d_a in ds])  # (A, p, p)
    if model == "log_normal":
        off = ~np.eye(p, dtype=bool)
        if (obs[:, off] <= 0).any():
            raise NumericalError("log-normal model requires positive off-diagonal distances")
        safe = obs.copy()
        safe[:, np.eye(p, dtype=bool)] = 1.0
        log_obs = np.log(safe)

    rng = np.random.default_rng(seed)
    if init is None:
        coords = rng.uniform(size=(p, 2))
    else:
        if init.labels != labels:
            raise DataError("init embedding labels do not match the distance matrices")
        if (init.coords < 0).any() or (init.coords > 1).any():
            raise DataError("init coordinates must lie in the unit square")
        coords = init.coords.copy()
    sigma2 = np.full(A, beta / (alpha - 1.0))

    iu = np.triu_indices(p, 1)

    def pair_loglik_row(j: int, pos: np.ndarray) -> float:
        """Log-likelihood terms of all pairs containing feature j."""
        diff = coords - pos
        diff[j] = 0.0
        delta = np.sqrt((diff**2).sum(axis=1))
        keep = np.arange(p) != j
        delta = delta[keep]
        total = 0.0
        if model == "truncated_normal":
            for a in range(A):
                sd = np.sqrt(sigma2[a])
                z = (obs[a, j, keep] - delta) / sd
                total += float(-0.5 * (z**2).sum() - log_ndtr(delta / sd).sum())
        else:
            if (delta <= 0).any():
                return -np.inf
            ld = np.log(delta)
            for a in range(A):
                z = (log_obs[a, j, keep] - ld) / np.sqrt(sigma2[a])
                total += float(-0.5 * (z**2).sum())
        return total

    def full_loglik() -> float:
        delta = squareform(pdist(coords))
        total = float(-(m / 2.0) * np.log(sigma2).sum())
        if model == "truncated_normal":
            for a in range(A):
                sd = np.sqrt(sigma2[a])
                z = (obs[a][iu] - delta[iu]) / sd
                total += float(-0.5 * (z**2).sum() - log_ndtr(delta[iu] / sd).sum())
        else:
            du = delta[iu]
            if (du <= 0).any():
                return -np.inf
            ld = np.log(du)
            for a in range(A):
                z = (log_obs[a][iu] - ld) / np.sqrt(sigma2[a])
                total += float(-0.5 * (z**2).sum())
        return total

    def log_prior_sigma() -> float:
        return float((-(alpha + 1.0) * np.log(sigma2) - beta / sigma2).sum())

    def sse(a: int) -> float:
        delta = pdist(coords)
        if model == "truncated_normal":
            return float(((obs[a][iu] - delta) ** 2).sum())
        return float(((log_obs[a][iu] - np.log(delta)) ** 2).sum())

    accepted = 0
    proposed = 0
    trace = []
    mean_coords = np.zeros_like(coords)
    mean_sigma2 = np.zeros(A)
    kept = 0

    for sweep in range(1, iters + 1):
        for j in range(p):
            prop = _reflect_unit(coords[j] + rng.normal(scale=step, size=2))
            cur_ll = pair_loglik_row(j, coords[j])
            new_ll = pair_loglik_row(j, prop)
            proposed += 1
            if np.log(rng.uniform()) < new_ll - cur_ll:
                coords[j] = prop
                accepted += 1
        for a in range(A):
            if model == "log_normal":
                shape = alpha + m / 2.0
                rate = beta + 0.5 * sse(a)
                sigma2[a] = rate / rng.gamma(shape)
            else:
                u = np.log(sigma2[a])

                def target(uu: float) -> float:
                    s2 = np.exp(uu)
                    sd = np.sqrt(s2)
                    delta = pdist(coords)
                    phi = float(log_ndtr(delta / sd).sum())
                    return (
                        -(m / 2.0 + alpha) * uu
                        - (beta + 0.5 * sse(a)) / s2
                        - phi
                    )

                u_new = u + rng.normal(scale=0.3)
                if np.log(rng.uniform()) < target(u_new) - target(u):
                    sigma2[a] = float(np.exp(u_new))
        log_post = full_loglik() + log_prior_sigma()
        trace.append(
            {"iteration": sweep, "log_posterior": log_post, "sigma2": sigma2.tolist()}
        )
        if sweep > burn_in:
            mean_coords += coords
            mean_sigma2 += sigma2
            kept += 1

    mean_coords /= kept
    mean_sigma2 /= kept
    embedding = Embedding(list(labels), mean_coords, f"bmds({model})")
    return BmdsResult(embedding, PrecisionWeights(mean_sigma2), trace, accepted / proposed)


def procrustes_residual(a: np.ndarray, b: np.ndarray) -> float:
    """RMS pointwise distance after the best rigid alignment of b onto a."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    A = a - a.mean(axis=0)
    B = b - b.mean(axis=0)
    R, _ = scipy.linalg.orthogonal_procrustes(B, A)
    return float(np.sqrt(((B @ R - A) ** 2).sum(axis=1).mean()))


# --- projection specs used by the pipelines and CLI -------------------------


@dataclass(frozen=True)
class ProjectionSpec:
    """One distance-metric / projection choice feeding the ensemble."""

    method: str
    k: int = 5
    heat_sigma: object = None

    def __post_init__(self):
        if self.method not in ("mds", "isomap", "lle", "le"):
            raise DataError(f"unknown projection method {self.method!r}")

    @property
    def tag(self) -> str:
        if self.method == "mds":
            return "mds"
        if self.method == "le" and self.heat_sigma == "binary":
            return f"le(k={self.k},binary)"
        return f"{self.method}(k={self.k})"


def run_projection(t: FeatureTable, spec: ProjectionSpec) -> Embedding:
    """Run one initializer on the table; counts toward projections_run."""
    instrument.counters.projections_run += 1
    if spec.method == "mds":
        return classical_mds(pairwise_euclidean(t))
    if spec.method == "isomap":
        return isomap(pairwise_euclidean(t), spec.k)
    if spec.method == "lle":
        return lle(t, spec.k)
    return laplacian_eigenmaps(pairwise_euclidean(t), spec.k, spec.heat_sigma)


def ambient_distances(t: FeatureTable, spec: ProjectionSpec) -> DistanceMatrix:
    """Distance matrix in the original feature space under a spec's metric."""
    base = pairwise_euclidean(t)
    if spec.method == "isomap":
        return geodesic_distances(base, spec.k)
    return base


def save_embedding_csv(e: Embedding, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature_label", "x", "y", "method_tag"])
        for label, (x, y) in zip(e.labels, e.coords):
            writer.writerow([label, format(x, ".17g"), format(y, ".17g"), e.method_tag])


def load_embedding_csv(path) -> Embedding:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    labels = [r[0] for r in rows[1:]]
    coords = np.array([[float(r[1]), float(r[2])] for r in rows[1:]])
    tag = rows[1][3] if len(rows) > 1 else ""
    return Embedding(labels, coords, tag)
