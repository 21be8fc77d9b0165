"""Synthetic grouped-feature tables for demos and end-to-end checks."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .dataio import FeatureTable


def grouped_feature_table(
    n: int = 120,
    p: int = 36,
    n_groups: int = 4,
    feature_noise: float = 0.35,
    response_noise: float = 0.3,
    seed: int = 0,
) -> FeatureTable:
    """Features built from shared group factors, response a linear mix of them.

    Features in the same group are noisy copies of one latent factor, so
    their columns sit close together under any reasonable dissimilarity,
    and the response carries signal only through the group factors.
    """
    rng = np.random.default_rng(seed)
    groups = np.arange(p) % n_groups
    z = rng.normal(size=(n, n_groups))
    values = z[:, groups] + feature_noise * rng.normal(size=(n, p))
    coef = rng.choice([-1.0, 1.0], size=n_groups) * rng.uniform(0.5, 1.5, size=n_groups)
    y = z @ coef + response_noise * rng.normal(size=n)
    ids = [f"s{i:04d}" for i in range(n)]
    names = [f"f{j:03d}" for j in range(p)]
    return FeatureTable(ids, names, values, y)


def write_feature_csv(t: FeatureTable, path, response_column: str = "y") -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *t.feature_names, response_column])
        for sid, row, y in zip(t.sample_ids, t.values, t.response):
            writer.writerow([sid, *[format(v, ".17g") for v in row], format(y, ".17g")])
    return path
