"""Task adapters: native prediction sets to normalized step losses and back.

Two set families are supported:

* intervals ``[f(x) - w, f(x) + w]`` that grow with the width ``w``; the
  internal parameter is ``u = -w``;
* segmentation masks ``{pixels with score >= t}`` that shrink as ``t`` grows;
  the internal parameter is ``u = t``.

In both cases the loss is nondecreasing and left-continuous in ``u``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .loss import StepLoss


class Orientation(enum.Enum):
    GROWING = "growing"  # native parameter is -u
    SHRINKING = "shrinking"  # native parameter is u


def to_native(orientation: Orientation, u):
    """Internal threshold to the task's native parameter (width or score cut)."""
    return -u if Orientation(orientation) is Orientation.GROWING else u


def from_native(orientation: Orientation, t):
    return -t if Orientation(orientation) is Orientation.GROWING else t


@dataclass(frozen=True)
class Interval:
    """Closed interval ``[center - half_width, center + half_width]``."""

    center: float
    half_width: float

    @property
    def lower(self) -> float:
        return self.center - self.half_width

    @property
    def upper(self) -> float:
        return self.center + self.half_width

    def contains(self, y) -> bool:
        # written as a distance test so it agrees bitwise with interval_loss
        return bool(abs(y - self.center) <= self.half_width)


@dataclass(frozen=True, eq=False)
class IntervalTask:
    predictions: np.ndarray
    labels: np.ndarray
    orientation = Orientation.GROWING

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if p.size != y.size:
            raise ValueError("predictions and labels disagree in length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y))):
            raise ValueError("predictions and labels must be finite")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "labels", y)

    @property
    def residuals(self) -> np.ndarray:
        return np.abs(self.labels - self.predictions)

    def losses(self) -> list[StepLoss]:
        return [interval_loss(p, y) for p, y in zip(self.predictions, self.labels)]


@dataclass(frozen=True, eq=False)
class SegmentationSample:
    """Per-pixel scores in [0, 1] and a binary ground-truth mask."""

    scores: np.ndarray
    mask: np.ndarray
    orientation = Orientation.SHRINKING

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        m = np.asarray(self.mask)
        if s.ndim != 2 or s.shape != m.shape:
            raise ValueError("scores and mask must be 2-D arrays of equal shape")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        if not (np.all(np.isfinite(s)) and s.min() >= 0.0 and s.max() <= 1.0):
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "mask", m.astype(bool))

    @property
    def positives(self) -> int:
        return int(self.mask.sum())


def interval_loss(prediction: float, label: float) -> StepLoss:
    """Miscoverage of the closed interval ``prediction +- w`` as a function of ``u = -w``."""
    r = abs(float(label) - float(prediction))
    if not np.isfinite(r):
        raise ValueError("prediction and label must be finite")
    return StepLoss([-r], [0.0, 1.0])


def recall_loss(sample: SegmentationSample) -> StepLoss:
    """``1 - recall`` of the mask ``score >= u``: the share of positives scoring below ``u``."""
    pos = sample.scores[sample.mask]
    m = pos.size
    if m == 0:
        raise ValueError("recall loss is undefined for an empty mask")
    levels, counts = np.unique(pos, return_counts=True)
    # kept = positives still captured just above each level; matches 1 - recall bitwise
    kept = m - np.cumsum(counts)
    return StepLoss(levels, np.r_[0.0, 1.0 - kept / m])


def apply_threshold(record, lambda_native: float):
    """Prediction set for one record at a native threshold.

    ``record`` is either a point prediction (interval task, threshold = width,
    negative widths treated as 0) or a score map / ``SegmentationSample``
    (threshold = score cut, pixels with ``score >= t`` are kept).
    """
    if isinstance(record, SegmentationSample):
        return record.scores >= lambda_native
    arr = np.asarray(record, dtype=np.float64)
    if arr.ndim == 2:
        return arr >= lambda_native
    if arr.ndim == 0:
        return Interval(float(arr), max(float(lambda_native), 0.0))
    raise ValueError("record must be a scalar prediction or a 2-D score map")


@dataclass(frozen=True)
class MaskMetrics:
    recall: float
    precision: float


def mask_metrics(predicted, truth) -> MaskMetrics:
    """Pixel recall and precision; precision is 1 for an empty prediction."""
    pred = np.asarray(predicted, dtype=bool)
    true = np.asarray(truth, dtype=bool)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    n_true = int(true.sum())
    if n_true == 0:
        raise ValueError("recall is undefined for an empty ground-truth mask")
    hits = int(np.count_nonzero(pred & true))
    n_pred = int(pred.sum())
    precision = 1.0 if n_pred == 0 else hits / n_pred
    return MaskMetrics(recall=hits / n_true, precision=precision)
