"""Combining per-projection predictors: linear stacking, channel tensors,
and a closed-form spatial ridge standing in for the CNN."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.ndimage import uniform_filter

from . import instrument
from .errors import DataError
from .images import RefinedImageSet


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """n x A predictions, one column per model tag."""

    model_tags: list[str]
    yhat: np.ndarray
    sample_ids: list[str]

    def __post_init__(self):
        yhat = np.asarray(self.yhat, dtype=float)
        if yhat.ndim != 2:
            raise DataError("yhat must be n x A")
        if yhat.shape != (len(self.sample_ids), len(self.model_tags)):
            raise DataError("prediction shape does not match tags / sample ids")
        if not np.isfinite(yhat).all():
            raise DataError("predictions contain NaN or Inf")
        if len(set(self.model_tags)) != len(self.model_tags):
            raise DataError("duplicate model tags")
        yhat.setflags(write=False)
        object.__setattr__(self, "yhat", yhat)

    @property
    def n(self) -> int:
        return self.yhat.shape[0]

    @property
    def n_models(self) -> int:
        return self.yhat.shape[1]

    def column(self, tag: str) -> np.ndarray:
        return self.yhat[:, self.model_tags.index(tag)]


@dataclass(frozen=True, eq=False)
class StackingModel:
    tags: list[str]
    gamma: np.ndarray
    intercept: float

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        if not np.isfinite(gamma).all() or not np.isfinite(self.intercept):
            raise DataError("stacking coefficients must be finite")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

    def to_json(self) -> str:
        payload = {
            "tags": list(self.tags),
            "gamma": self.gamma.tolist(),
            "intercept": self.intercept,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StackingModel":
        payload = json.loads(text)
        return cls(list(payload["tags"]), np.asarray(payload["gamma"]), float(payload["intercept"]))


def fit_stacking(p: PredictionSet, y: np.ndarray) -> StackingModel:
    """Least squares of y on the prediction columns plus an intercept.

    Rank deficiency falls back to the minimum-norm solution with a warning
    naming the dependent columns.
    """
    y = np.asarray(y, dtype=float)
    if len(y) != p.n:
        raise DataError("response length does not match predictions")
    if p.n <= p.n_models:
        raise DataError(f"need more than {p.n_models} samples to fit stacking, got {p.n}")
    X = np.column_stack([p.yhat, np.ones(p.n)])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        _, _, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
        dependent = sorted(i for i in piv[rank:] if i < p.n_models)
        names = ", ".join(p.model_tags[i] for i in dependent) or "intercept"
        warnings.warn(f"collinear prediction columns ({names}); minimum-norm solution used")
    return StackingModel(list(p.model_tags), coef[:-1], float(coef[-1]))


def predict_stacked(m: StackingModel, p: PredictionSet) -> np.ndarray:
    if list(p.model_tags) != list(m.tags):
        raise DataError("prediction tags do not match the fitted stacking model")
    return p.yhat @ m.gamma + m.intercept


def stack_images(sets: list[RefinedImageSet], tags: list[str] | None = None) -> "ImageTensorSet":
    """Concatenate image sets channel-wise into one g x g x A tensor per sample."""
    if not sets:
        raise DataError("need at least one image set")
    g = sets[0].grid_size
    ids = list(sets[0].sample_ids)
    for s in sets[1:]:
        if s.grid_size != g:
            raise DataError("image sets have different grid sizes")
        if list(s.sample_ids) != ids:
            raise DataError("image sets have different sample orders")
    if tags is None:
        tags = [f"ch{i}" for i in range(len(sets))]
    if len(tags) != len(sets):
        raise DataError("channel tag count does not match image sets")
    tensors = np.stack([s.images for s in sets], axis=-1)
    return ImageTensorSet(tensors, list(tags), ids, g)


@dataclass(frozen=True, eq=False)
class ImageTensorSet:
    """n tensors of shape g x g x A with channel provenance tags."""

    tensors: np.ndarray
    channel_tags: list[str]
    sample_ids: list[str]
    grid_size: int

    def __post_init__(self):
        tensors = np.asarray(self.tensors, dtype=float)
        g = self.grid_size
        if tensors.ndim != 4 or tensors.shape[1:3] != (g, g):
            raise DataError("tensors must be (n, g, g, A)")
        if tensors.shape[3] != len(self.channel_tags):
            raise DataError("channel count does not match tags")
        if tensors.shape[0] != len(self.sample_ids):
            raise DataError("sample count does not match ids")
        tensors.setflags(write=False)
        object.__setattr__(self, "tensors", tensors)


@dataclass(frozen=True, eq=False)
class RegressorModel:
    coef: np.ndarray
    intercept: float
    lam: float
    smooth: float
    image_shape: tuple

    def to_json(self) -> str:
        payload = {
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "smooth": self.smooth,
            "image_shape": list(self.image_shape),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RegressorModel":
        payload = json.loads(text)
        return cls(
            np.asarray(payload["coef"]),
            float(payload["intercept"]),
            float(payload["lambda"]),
            float(payload["smooth"]),
            tuple(payload["image_shape"]),
        )


def _channel_stack(x) -> np.ndarray:
    """(n, g, g, C) view of an image set or tensor set."""
    if isinstance(x, RefinedImageSet):
        return x.images[..., None]
    if isinstance(x, ImageTensorSet):
        return x.tensors
    raise DataError("expected a RefinedImageSet or ImageTensorSet")


def regression_design(x, smooth: float = 0.5) -> np.ndarray:
    """Flattened design matrix of the reference regressor.

    Each channel is the image plus ``smooth`` times its 3x3 local mean
    (zero-padded). The local term couples neighboring pixels, which is what
    makes the regressor respond to the pixel layout; ``smooth=0`` recovers
    plain ridge on raw intensities.
    """
    stack = _channel_stack(x)
    n = stack.shape[0]
    if smooth != 0.0:
        blurred = uniform_filter(stack, size=(1, 3, 3, 1), mode="constant", cval=0.0)
        stack = stack + smooth * blurred
    return stack.reshape(n, -1)


def fit_reference_regressor(x, y: np.ndarray, lam: float = 1.0, smooth: float = 0.5) -> RegressorModel:
    """Closed-form ridge on the spatially smoothed intensities.

    The intercept is unpenalized (data are centered before the solve), so
    lam -> infinity shrinks predictions to the training mean.
    """
    if lam < 0:
        raise DataError("lambda must be nonnegative")
    y = np.asarray(y, dtype=float)
    stack = _channel_stack(x)
    if stack.shape[0] != len(y):
        raise DataError("response length does not match image count")
    X = regression_design(x, smooth)
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    if lam > 0:
        d = X.shape[1]
        coef = np.linalg.solve(Xc.T @ Xc + lam * np.eye(d), Xc.T @ yc)
    else:
        coef, _, _, _ = np.linalg.lstsq(Xc, yc, rcond=None)
    intercept = y_mean - float(x_mean @ coef)
    instrument.counters.regressors_trained += 1
    return RegressorModel(coef, intercept, float(lam), float(smooth), stack.shape[1:])


def predict_reference(model: RegressorModel, x) -> np.ndarray:
    stack = _channel_stack(x)
    if stack.shape[1:] != tuple(model.image_shape):
        raise DataError("image shape does not match the fitted regressor")
    return regression_design(x, model.smooth) @ model.coef + model.intercept


# --- PredictionSet CSV ------------------------------------------------------


def save_predictions_csv(p: PredictionSet, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", *p.model_tags])
        for sid, row in zip(p.sample_ids, p.yhat):
            writer.writerow([sid, *[format(v, ".17g") for v in row]])


def load_predictions_csv(path) -> PredictionSet:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path} has no prediction rows")
    tags = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    yhat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return PredictionSet(tags, yhat, ids)
