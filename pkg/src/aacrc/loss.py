"""Monotone step losses and their antiderivatives.

Every loss is stored in one orientation: nondecreasing in the internal
threshold parameter ``u``. Larger ``u`` means a smaller prediction set and a
larger loss, so the antiderivative of ``loss - alpha`` is convex in ``u``.
Task adapters (see :mod:`aacrc.tasks`) map native thresholds into this
orientation.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

_VALUE_SLACK = 1e-9


def check_alpha(alpha: float) -> float:
    """Validate a target risk level and return it as a float."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


class StepLoss:
    """Left-continuous nondecreasing step function with values in [0, 1].

    With breakpoints ``b[0] < ... < b[k-1]`` and values ``v[0] <= ... <= v[k]``
    the loss is ``v[0]`` for ``u <= b[0]``, ``v[j]`` on ``(b[j-1], b[j]]`` and
    ``v[k]`` for ``u > b[k-1]``.

    Duplicate breakpoints are merged (the value after the last duplicate
    wins, which is the largest one) and zero-height jumps are dropped, so two
    losses that agree as functions have identical arrays.

    Parameters
    ----------
    breakpoints : sequence of float
        Sorted (nondecreasing) jump locations.
    values : sequence of float
        ``len(breakpoints) + 1`` loss levels, nondecreasing, within [0, 1].
    """

    __slots__ = ("breakpoints", "values")

    def __init__(self, breakpoints: Sequence[float] = (), values: Sequence[float] = (0.0,)):
        b = np.asarray(breakpoints, dtype=np.float64).reshape(-1)
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.size != b.size + 1:
            raise ValueError(
                f"need len(values) == len(breakpoints) + 1, got {v.size} and {b.size}"
            )
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(v))):
            raise ValueError("breakpoints and values must be finite")
        if b.size and np.any(np.diff(b) < 0):
            raise ValueError("breakpoints must be sorted")
        if np.any(v < -_VALUE_SLACK) or np.any(v > 1.0 + _VALUE_SLACK):
            raise ValueError("loss values must lie in [0, 1]")
        v = np.clip(v, 0.0, 1.0)
        if np.any(np.diff(v) < -_VALUE_SLACK):
            raise ValueError("loss values must be nondecreasing")
        v = np.maximum.accumulate(v)

        if b.size:
            # keep the last occurrence of each breakpoint, then drop flat jumps
            last = np.r_[b[1:] != b[:-1], True]
            b = b[last]
            v = np.r_[v[0], v[1:][last]]
            rises = v[1:] > v[:-1]
            b = b[rises]
            v = np.r_[v[0], v[1:][rises]]

        b.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    def __setattr__(self, name, value):
        raise AttributeError("StepLoss is immutable")

    @classmethod
    def from_jumps(cls, positions, heights, base: float = 0.0) -> "StepLoss":
        """Build a loss from unsorted jump locations and nonnegative heights.

        Jumps at equal positions are accumulated into one breakpoint.
        """
        pos = np.asarray(positions, dtype=np.float64).reshape(-1)
        h = np.asarray(heights, dtype=np.float64).reshape(-1)
        if pos.shape != h.shape:
            raise ValueError("positions and heights must have the same length")
        if np.any(h < 0):
            raise ValueError("jump heights must be nonnegative")
        uniq, inverse = np.unique(pos, return_inverse=True)
        total = np.bincount(inverse, weights=h, minlength=uniq.size)
        return cls(uniq, base + np.r_[0.0, np.cumsum(total)])

    @classmethod
    def constant(cls, value: float) -> "StepLoss":
        return cls((), (value,))

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self.values)

    @property
    def k(self) -> int:
        return self.breakpoints.size

    @property
    def anchor(self) -> float:
        """Point where the antiderivative is zero."""
        return float(self.breakpoints[0]) if self.k else 0.0

    def __call__(self, u):
        return eval_loss(self, u)

    def __eq__(self, other):
        if not isinstance(other, StepLoss):
            return NotImplemented
        return np.array_equal(self.breakpoints, other.breakpoints) and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.breakpoints.tobytes(), self.values.tobytes()))

    def __repr__(self):
        return f"StepLoss(breakpoints={self.breakpoints.tolist()}, values={self.values.tolist()})"


def eval_loss(loss: StepLoss, u):
    """Evaluate the loss at ``u`` (scalar or array), left-continuously."""
    idx = np.searchsorted(loss.breakpoints, u, side="left")
    out = loss.values[idx]
    return float(out) if np.ndim(out) == 0 else out


def right_limit(loss: StepLoss, u):
    """Right limit ``loss(u+)``."""
    idx = np.searchsorted(loss.breakpoints, u, side="right")
    out = loss.values[idx]
    return float(out) if np.ndim(out) == 0 else out


def antiderivative(loss: StepLoss, alpha: float, u):
    """Integral of ``loss - alpha`` from the anchor to ``u``.

    The anchor is the first breakpoint (0 for a constant loss). The result is
    convex and piecewise linear with slope ``v[j] - alpha`` on each piece.
    """
    alpha = check_alpha(alpha)
    u = np.asarray(u, dtype=np.float64)
    b = loss.breakpoints
    out = (loss.values[0] - alpha) * (u - loss.anchor)
    if b.size:
        hinge = np.maximum(u[..., None] - b, 0.0)
        out = out + hinge @ loss.jumps
    return float(out) if out.ndim == 0 else out


def antiderivative_subgradient(loss: StepLoss, alpha: float, u: float) -> tuple[float, float]:
    """Subdifferential ``[loss(u) - alpha, loss(u+) - alpha]`` of the antiderivative."""
    alpha = check_alpha(alpha)
    return eval_loss(loss, float(u)) - alpha, right_limit(loss, float(u)) - alpha


def crossing_threshold(loss: StepLoss, alpha: float) -> float:
    """Largest ``u`` with ``loss(u) <= alpha``.

    Returns ``+inf`` when the loss never exceeds ``alpha`` and ``-inf`` when it
    exceeds ``alpha`` everywhere. Left-continuity makes the supremum attained.
    """
    alpha = check_alpha(alpha)
    v = loss.values
    if v[0] > alpha:
        return -math.inf
    if v[-1] <= alpha:
        return math.inf
    first_above = int(np.argmax(v > alpha))
    return float(loss.breakpoints[first_above - 1])
