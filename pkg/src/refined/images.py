"""Pixel assignment by constrained hill climbing and image rendering,
plus the single-metric and fused (distance-averaged) pipelines."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.distance import pdist, squareform

from . import instrument
from .dataio import FeatureTable
from .distances import (
    DistanceMatrix,
    FusedDistance,
    embedding_distances,
    estimate_precisions,
)
from .errors import DataError
from .projections import (
    Embedding,
    ProjectionSpec,
    ambient_distances,
    bmds_sample,
    classical_mds,
    normalize_to_unit_square,
    run_projection,
    smacof_refine,
)

ADJACENT_RADIUS = 2  # Chebyshev radius of the local move neighborhood
ALL_PAIRS_MAX_P = 200


@dataclass(frozen=True, eq=False)
class PixelAssignment:
    """Injective map feature label -> (row, col) on a g x g grid.

    ``target`` is the reference distance matrix the hill climb optimizes
    against; it is None for assignments reloaded from JSON.
    """

    grid_size: int
    cells: dict
    target: DistanceMatrix | None = None

    def __post_init__(self):
        g = self.grid_size
        if g < 1:
            raise DataError("grid size must be positive")
        if g * g < len(self.cells):
            raise DataError(f"grid {g}x{g} cannot hold {len(self.cells)} features")
        seen = set()
        for label, (row, col) in self.cells.items():
            if not (0 <= row < g and 0 <= col < g):
                raise DataError(f"cell for {label!r} outside the grid")
            if (row, col) in seen:
                raise DataError(f"two features share cell {(row, col)}")
            seen.add((row, col))
        if self.target is not None:
            if set(self.target.labels) != set(self.cells):
                raise DataError("assignment labels do not match the target matrix")

    @property
    def labels(self) -> list[str]:
        if self.target is not None:
            return list(self.target.labels)
        return list(self.cells)

    def positions(self) -> np.ndarray:
        """(p, 2) integer rows/cols in label order."""
        return np.array([self.cells[label] for label in self.labels], dtype=int)

    def cell_centers(self) -> np.ndarray:
        """(p, 2) unit-square centers (x, y) of the assigned cells."""
        pos = self.positions()
        g = self.grid_size
        return np.column_stack(((pos[:, 1] + 0.5) / g, (pos[:, 0] + 0.5) / g))

    def same_cells(self, other: "PixelAssignment") -> bool:
        return self.grid_size == other.grid_size and {
            k: tuple(v) for k, v in self.cells.items()
        } == {k: tuple(v) for k, v in other.cells.items()}

    def to_json(self) -> str:
        payload = {
            "grid_size": self.grid_size,
            "cells": {label: [int(r), int(c)] for label, (r, c) in self.cells.items()},
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, target: DistanceMatrix | None = None) -> "PixelAssignment":
        payload = json.loads(text)
        cells = {label: (int(rc[0]), int(rc[1])) for label, rc in payload["cells"].items()}
        return cls(grid_size=int(payload["grid_size"]), cells=cells, target=target)


@dataclass(frozen=True, eq=False)
class RefinedImageSet:
    """One g x g intensity grid per sample under a fixed pixel assignment."""

    assignment: PixelAssignment
    images: np.ndarray
    fill: float
    sample_ids: list[str]

    def __post_init__(self):
        images = np.asarray(self.images, dtype=float)
        g = self.assignment.grid_size
        if images.ndim != 3 or images.shape[1:] != (g, g):
            raise DataError("images must be (n, g, g)")
        if images.shape[0] != len(self.sample_ids):
            raise DataError("sample id count does not match image count")
        if not np.isfinite(images).all():
            raise DataError("image intensities contain NaN or Inf")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def grid_size(self) -> int:
        return self.assignment.grid_size


@dataclass(frozen=True, eq=False)
class HillClimbResult:
    assignment: PixelAssignment
    cost_trace: np.ndarray


def assignment_cell_distances(a: PixelAssignment) -> DistanceMatrix:
    """Pairwise unit-square distances between assigned cell centers."""
    return DistanceMatrix(a.labels, squareform(pdist(a.cell_centers())))


def rasterize(e: Embedding, g="auto", target: DistanceMatrix | None = None) -> PixelAssignment:
    """Snap embedded features onto grid cells, one feature per cell.

    Features are placed farthest-from-center first, each into the nearest
    free cell; equidistant free cells resolve by row-major order. The
    default target is the embedding's own pairwise distances.
    """
    p = e.p
    if (e.coords < 0).any() or (e.coords > 1).any():
        raise DataError("rasterize requires unit-square coordinates")
    if g == "auto":
        g = math.ceil(math.sqrt(p))
    g = int(g)
    if g * g < p:
        raise DataError(f"grid {g}x{g} cannot hold {p} features")
    if target is None:
        target = embedding_distances(e)
    elif list(target.labels) != list(e.labels):
        raise DataError("target labels do not match the embedding")

    center_dist = np.sqrt(((e.coords - 0.5) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(p), -center_dist))

    rows, cols = np.divmod(np.arange(g * g), g)
    centers = np.column_stack(((cols + 0.5) / g, (rows + 0.5) / g))  # row-major
    free = np.ones(g * g, dtype=bool)
    cells: dict[str, tuple[int, int]] = {}
    for j in order:
        d2 = ((centers - e.coords[j]) ** 2).sum(axis=1)
        d2[~free] = np.inf
        best = d2.min()
        cell = int(np.flatnonzero(d2 == best)[0])  # first row-major tie
        free[cell] = False
        cells[e.labels[j]] = (int(rows[cell]), int(cols[cell]))
    return PixelAssignment(grid_size=g, cells=cells, target=target)


def assignment_cost(a: PixelAssignment) -> float:
    """Scaled raw stress of cell-center distances against the target.

    The scale is the least-squares factor pi = sum(t*c)/sum(c*c), recomputed
    for every evaluation, so the cost is invariant to the unit mismatch
    between grid and target distances.
    """
    if a.target is None:
        raise DataError("assignment has no target distance matrix")
    t = a.target.condensed()
    c = pdist(a.cell_centers())
    scc = float((c**2).sum())
    if scc == 0:
        return float((t**2).sum())
    pi = float((t * c).sum()) / scc
    return float(((t - pi * c) ** 2).sum())


def _candidate_cells(g: int, row: int, col: int, neighborhood: str) -> list[int]:
    """Row-major flat indices a feature at (row, col) may try, excluding its own."""
    out = []
    if neighborhood == "all_pairs":
        for cell in range(g * g):
            if cell != row * g + col:
                out.append(cell)
        return out
    for r in range(max(0, row - ADJACENT_RADIUS), min(g, row + ADJACENT_RADIUS + 1)):
        for c in range(max(0, col - ADJACENT_RADIUS), min(g, col + ADJACENT_RADIUS + 1)):
            if (r, c) != (row, col):
                out.append(r * g + c)
    return out


def hill_climb(
    a: PixelAssignment, max_sweeps: int = 50, neighborhood: str | None = None
) -> HillClimbResult:
    """Greedy first-improvement search over swaps and moves to empty cells.

    Each sweep visits features in label order and candidate cells in
    row-major order; a change is committed only if it strictly lowers the
    cost, so the returned trace is strictly decreasing. Stops after a sweep
    with no change or after ``max_sweeps``.
    """
    if a.target is None:
        raise DataError("assignment has no target distance matrix")
    instrument.counters.hill_climbs_run += 1
    g = a.grid_size
    labels = a.labels
    p = len(labels)
    if neighborhood is None:
        neighborhood = "all_pairs" if p <= ALL_PAIRS_MAX_P else "adjacent_cells"
    if neighborhood not in ("all_pairs", "adjacent_cells"):
        raise DataError(f"unknown neighborhood {neighborhood!r}")

    T = a.target.d
    iu = np.triu_indices(p, 1)
    pos = a.positions()
    occupant = np.full(g * g, -1, dtype=int)
    for j in range(p):
        occupant[pos[j, 0] * g + pos[j, 1]] = j

    def center_of(flat: int) -> np.ndarray:
        r, c = divmod(flat, g)
        return np.array([(c + 0.5) / g, (r + 0.5) / g])

    P = np.column_stack(((pos[:, 1] + 0.5) / g, (pos[:, 0] + 0.5) / g))
    C = squareform(pdist(P))
    s_tt = float((T[iu] ** 2).sum())
    s_tc = float((T[iu] * C[iu]).sum())
    s_cc = float((C[iu] ** 2).sum())

    def total_cost(tc: float, cc: float) -> float:
        if cc == 0:
            return s_tt
        return s_tt - tc * tc / cc

    cost = total_cost(s_tc, s_cc)
    trace = [cost]

    for _ in range(max_sweeps):
        changed = False
        for j in range(p):
            flat_j = pos[j, 0] * g + pos[j, 1]
            for cell in _candidate_cells(g, pos[j, 0], pos[j, 1], neighborhood):
                k = occupant[cell]
                if k >= 0:
                    # swap features j and k; sum(c^2) is unchanged
                    delta_tc = float(((T[j] - T[k]) * (C[k] - C[j])).sum()) + 2.0 * T[j, k] * C[j, k]
                    delta_cc = 0.0
                else:
                    new_row = np.sqrt(((P - center_of(cell)) ** 2).sum(axis=1))
                    new_row[j] = 0.0
                    delta_tc = float((T[j] * (new_row - C[j])).sum())
                    delta_cc = float((new_row**2 - C[j] ** 2).sum())
                if not total_cost(s_tc + delta_tc, s_cc + delta_cc) < cost:
                    continue
                # apply, then re-verify against exactly recomputed sums
                old_pos_j = pos[j].copy()
                if k >= 0:
                    pos[j], pos[k] = pos[k].copy(), old_pos_j
                    occupant[flat_j], occupant[cell] = k, j
                    P[[j, k]] = P[[k, j]]
                    C[[j, k], :] = C[[k, j], :]
                    C[:, [j, k]] = C[:, [k, j]]
                else:
                    pos[j] = divmod(cell, g)
                    occupant[flat_j], occupant[cell] = -1, j
                    P[j] = center_of(cell)
                    row = np.sqrt(((P - P[j]) ** 2).sum(axis=1))
                    row[j] = 0.0
                    C[j, :] = row
                    C[:, j] = row
                new_tc = float((T[iu] * C[iu]).sum())
                new_cc = float((C[iu] ** 2).sum())
                new_cost = total_cost(new_tc, new_cc)
                if new_cost < trace[-1]:
                    s_tc, s_cc, cost = new_tc, new_cc, new_cost
                    trace.append(cost)
                    changed = True
                    flat_j = pos[j, 0] * g + pos[j, 1]
                else:  # numerically marginal: undo
                    if k >= 0:
                        pos[k], pos[j] = pos[j].copy(), old_pos_j
                        occupant[flat_j], occupant[cell] = j, k
                        P[[j, k]] = P[[k, j]]
                        C[[j, k], :] = C[[k, j], :]
                        C[:, [j, k]] = C[:, [k, j]]
                    else:
                        occupant[cell] = -1
                        pos[j] = old_pos_j
                        occupant[flat_j] = j
                        P[j] = center_of(flat_j)
                        row = np.sqrt(((P - P[j]) ** 2).sum(axis=1))
                        row[j] = 0.0
                        C[j, :] = row
                        C[:, j] = row
        assert len({(r, c) for r, c in map(tuple, pos)}) == p, "cell injectivity lost"
        if not changed:
            break

    cells = {labels[j]: (int(pos[j, 0]), int(pos[j, 1])) for j in range(p)}
    out = PixelAssignment(grid_size=g, cells=cells, target=a.target)
    return HillClimbResult(out, np.array(trace))


def render_images(a: PixelAssignment, t: FeatureTable, fill: float = 0.0) -> RefinedImageSet:
    """Place each sample's normalized feature values at their assigned cells."""
    if set(t.feature_names) != set(a.cells):
        raise DataError("table features do not match the assignment")
    values = t.values
    if t.has_missing():
        raise DataError("render requires a cleaned table")
    if values.min() < -1e-12 or values.max() > 1 + 1e-12:
        raise DataError("render requires intensities normalized to [0, 1]")
    values = np.clip(values, 0.0, 1.0)
    g = a.grid_size
    images = np.full((t.n, g, g), float(fill))
    for j, name in enumerate(t.feature_names):
        row, col = a.cells[name]
        images[:, row, col] = values[:, j]
    return RefinedImageSet(a, images, float(fill), list(t.sample_ids))


def extract_features(s: RefinedImageSet) -> tuple[list[str], np.ndarray]:
    """Read intensities back through the assignment (inverse of render)."""
    labels = s.assignment.labels
    pos = s.assignment.positions()
    values = s.images[:, pos[:, 0], pos[:, 1]]
    return labels, values


# --- persistence ------------------------------------------------------------


def save_images(s: RefinedImageSet, directory, format: str = "csv") -> list[Path]:
    """Write one image file per sample plus assignment and metadata JSON."""
    if format not in ("png", "csv"):
        raise DataError(f"unknown image format {format!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    apath = directory / "assignment.json"
    apath.write_text(s.assignment.to_json(), encoding="utf-8")
    written.append(apath)
    meta = {
        "fill": s.fill,
        "format": format,
        "grid_size": s.grid_size,
        "sample_ids": list(s.sample_ids),
    }
    mpath = directory / "images_meta.json"
    mpath.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(mpath)
    for i in range(s.n):
        if format == "png":
            path = directory / f"{i:05d}.png"
            data = np.rint(255.0 * s.images[i]).astype(np.uint8)
            Image.fromarray(data, mode="L").save(path)
        else:
            path = directory / f"{i:05d}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                for row in s.images[i]:
                    writer.writerow([format_float(v) for v in row])
        written.append(path)
    return written


def format_float(v: float) -> str:
    return format(v, ".17g")


def load_images(directory, target: DistanceMatrix | None = None) -> RefinedImageSet:
    directory = Path(directory)
    meta = json.loads((directory / "images_meta.json").read_text(encoding="utf-8"))
    assignment = PixelAssignment.from_json(
        (directory / "assignment.json").read_text(encoding="utf-8"), target=target
    )
    g = meta["grid_size"]
    n = len(meta["sample_ids"])
    images = np.zeros((n, g, g))
    for i in range(n):
        if meta["format"] == "png":
            with Image.open(directory / f"{i:05d}.png") as img:
                images[i] = np.asarray(img, dtype=float) / 255.0
        else:
            with (directory / f"{i:05d}.csv").open(newline="", encoding="utf-8") as fh:
                images[i] = np.array([[float(v) for v in row] for row in csv.reader(fh)])
    return RefinedImageSet(assignment, images, float(meta["fill"]), list(meta["sample_ids"]))


# --- pipelines --------------------------------------------------------------


@dataclass(frozen=True)
class PipelineOptions:
    grid: object = "auto"
    distance_source: str = "projection"
    max_sweeps: int = 50
    neighborhood: str | None = None
    fill: float = 0.0
    rescale: bool = True
    smacof_max_iter: int = 500
    smacof_tol: float = 1e-12

    def __post_init__(self):
        if self.distance_source not in ("projection", "ambient"):
            raise DataError(f"unknown distance source {self.distance_source!r}")


@dataclass(frozen=True, eq=False)
class PipelineResult:
    images: RefinedImageSet
    fused: FusedDistance | None
    embedding: Embedding
    report: dict


def _spec_distance(t: FeatureTable, spec: ProjectionSpec, options: PipelineOptions) -> DistanceMatrix:
    if options.distance_source == "projection":
        return embedding_distances(run_projection(t, spec))
    instrument.counters.projections_run += 1
    return ambient_distances(t, spec)


def _embed_and_render(
    t: FeatureTable, target: DistanceMatrix, tag: str, options: PipelineOptions
) -> tuple[RefinedImageSet, Embedding, dict]:
    init = classical_mds(target)
    refined = smacof_refine(target, init, options.smacof_max_iter, options.smacof_tol)
    unit = normalize_to_unit_square(refined.embedding)
    unit = Embedding(unit.labels, unit.coords, tag)
    assignment = rasterize(unit, options.grid, target=target)
    climbed = hill_climb(assignment, options.max_sweeps, options.neighborhood)
    images = render_images(climbed.assignment, t, options.fill)
    report = {
        "method_tag": tag,
        "stress_initial": float(refined.stress_trace[0]),
        "stress_final": float(refined.stress_trace[-1]),
        "smacof_iterations": len(refined.stress_trace) - 1,
        "cost_initial": float(climbed.cost_trace[0]),
        "cost_final": float(climbed.cost_trace[-1]),
        "hill_climb_moves": len(climbed.cost_trace) - 1,
    }
    return images, unit, report


def refined_pipeline(
    t: FeatureTable, spec: ProjectionSpec, options: PipelineOptions | None = None
) -> PipelineResult:
    """Single-metric path: one projection's distances drive the layout."""
    options = options or PipelineOptions()
    d = _spec_distance(t, spec, options)
    tag = f"refined<{spec.tag}>"
    images, embedding, report = _embed_and_render(t, d, tag, options)
    report["projection_specs"] = [spec.tag]
    report["counters"] = instrument.counters.snapshot()
    return PipelineResult(images, None, embedding, report)


def irefined_pipeline(
    t: FeatureTable,
    specs: list[ProjectionSpec],
    mode: str = "arithmetic",
    options: PipelineOptions | None = None,
    sampler: dict | None = None,
) -> PipelineResult:
    """Fused path: per-spec distances are precision-averaged into one
    matrix, and a single layout / hill climb / render follows.

    ``sampler`` switches the location estimate to the posterior sampler:
    a dict of ``bmds_sample`` keyword arguments (model, prior, iters,
    burn_in, step, seed).
    """
    options = options or PipelineOptions()
    if len(specs) < 2:
        raise DataError("the fused pipeline needs at least two projection specs")
    ds = [_spec_distance(t, spec, options) for spec in specs]
    fit = estimate_precisions(ds, mode=mode, rescale=options.rescale)
    fused = fit.fused
    tag = f"irefined<{mode};{','.join(s.tag for s in specs)}>"

    if sampler is not None:
        result = bmds_sample(ds, init=None, **sampler)
        unit = Embedding(result.embedding.labels, result.embedding.coords, tag)
        assignment = rasterize(unit, options.grid, target=fused.d_bar)
        climbed = hill_climb(assignment, options.max_sweeps, options.neighborhood)
        images = render_images(climbed.assignment, t, options.fill)
        report = {
            "method_tag": tag,
            "sampler_acceptance_rate": result.acceptance_rate,
            "sampler_sigma2": result.weights.sigma2.tolist(),
            "cost_initial": float(climbed.cost_trace[0]),
            "cost_final": float(climbed.cost_trace[-1]),
            "hill_climb_moves": len(climbed.cost_trace) - 1,
        }
        embedding = unit
        trace = result.trace
    else:
        images, embedding, report = _embed_and_render(t, fused.d_bar, tag, options)
        trace = None

    report.update(
        {
            "mode": mode,
            "projection_specs": [s.tag for s in specs],
            "sigma2": fit.weights.sigma2.tolist(),
            "fusion_weights": fit.weights.weights.tolist(),
            "scale_factors": fit.scales.tolist(),
            "fixed_point_iterations": fit.iterations,
        }
    )
    report["counters"] = instrument.counters.snapshot()
    if trace is not None:
        report["sampler_trace_length"] = len(trace)
        report["sampler_trace"] = trace
    return PipelineResult(images, fused, embedding, report)
