"""Calibration of per-input thresholds ``lambda(x) = phi(x) @ theta``.

For calibration features ``phi_i``, step losses ``l_i`` and a test feature
``phi_t`` the fitted coefficients minimise

    J(theta) = (1/(n+1)) * sum_i I_i(phi_i @ theta)
               + ((1-alpha)/(n+1)) * phi_t @ theta + R(theta),

where ``I_i`` is the antiderivative of ``l_i - alpha``. The test point enters
with the worst-case loss (slope ``1 - alpha``), so no loop over candidate
labels is needed. Stationarity of ``J`` in a nonnegative direction ``w``
bounds the ``phi @ w``-tilted risk by ``alpha - r(w) / E[phi @ w]``.

All thresholds are in the normalized orientation of :mod:`aacrc.loss`.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .loss import StepLoss, check_alpha

KINK_TOL = 1e-9


class InfeasibleLevelError(ValueError):
    """No finite threshold can satisfy the requested level."""


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Featurized calibration points and their losses.

    Besides the public fields the instance keeps a flattened view of all
    breakpoints (one entry per jump) used by the vectorized evaluators.
    """

    features: np.ndarray
    losses: tuple[StepLoss, ...]
    _owner: np.ndarray = field(init=False, repr=False)
    _bp: np.ndarray = field(init=False, repr=False)
    _jump: np.ndarray = field(init=False, repr=False)
    _v0: np.ndarray = field(init=False, repr=False)
    _vk: np.ndarray = field(init=False, repr=False)
    _anchor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        F = np.array(self.features, dtype=np.float64)
        if F.ndim == 1:
            F = F.reshape(-1, 1)
        losses = tuple(self.losses)
        if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
            raise ValueError("features must be an (n, d) array with n, d >= 1")
        if F.shape[0] != len(losses):
            raise ValueError(f"{F.shape[0]} feature rows but {len(losses)} losses")
        if not np.all(np.isfinite(F)):
            raise ValueError("features must be finite")
        if not all(isinstance(l, StepLoss) for l in losses):
            raise TypeError("losses must be StepLoss instances")
        F.setflags(write=False)
        counts = np.array([l.k for l in losses], dtype=np.int64)
        owner = np.repeat(np.arange(len(losses)), counts)
        bp = np.concatenate([l.breakpoints for l in losses]) if owner.size else np.zeros(0)
        jump = np.concatenate([l.jumps for l in losses]) if owner.size else np.zeros(0)
        sets = object.__setattr__
        sets(self, "features", F)
        sets(self, "losses", losses)
        sets(self, "_owner", owner)
        sets(self, "_bp", bp)
        sets(self, "_jump", jump)
        sets(self, "_v0", np.array([l.values[0] for l in losses]))
        sets(self, "_vk", np.array([l.values[-1] for l in losses]))
        sets(self, "_anchor", np.array([l.anchor for l in losses]))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def default_tol(self) -> float:
        return 1e-6 * (1.0 + float(np.median(np.linalg.norm(self.features, axis=1))))

    def loss_values(self, u: np.ndarray) -> np.ndarray:
        """Left-continuous loss of every calibration point at its own ``u``."""
        hit = self._bp < u[self._owner]
        return self._v0 + np.bincount(self._owner, self._jump * hit, minlength=self.n)

    def right_loss_values(self, u: np.ndarray) -> np.ndarray:
        hit = self._bp <= u[self._owner]
        return self._v0 + np.bincount(self._owner, self._jump * hit, minlength=self.n)

    def antiderivatives(self, u: np.ndarray, alpha: float) -> np.ndarray:
        hinge = np.maximum(u[self._owner] - self._bp, 0.0)
        return (self._v0 - alpha) * (u - self._anchor) + np.bincount(
            self._owner, self._jump * hinge, minlength=self.n
        )


@dataclass(frozen=True)
class Regularizer:
    """``R(theta) = gamma/2 * ||theta||^2`` for ridge, zero otherwise."""

    kind: str = "none"
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "ridge"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError("gamma must be finite and nonnegative")
        if self.kind == "none" and self.gamma != 0.0:
            raise ValueError("gamma is only meaningful for ridge")

    @classmethod
    def ridge(cls, gamma: float) -> "Regularizer":
        return cls("ridge", float(gamma))

    @property
    def strength(self) -> float:
        return self.gamma if self.kind == "ridge" else 0.0

    def value(self, theta) -> float:
        return 0.5 * self.strength * float(np.dot(theta, theta))

    def gradient(self, theta) -> np.ndarray:
        return self.strength * np.asarray(theta, dtype=np.float64)

    def directional(self, theta, w) -> float:
        """``d/de R(theta + e*w)`` at ``e = 0``."""
        return self.strength * float(np.dot(theta, w))


NO_REGULARIZER = Regularizer()


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``method`` is ``"auto"`` (exact scan for d == 1, simplex/QP otherwise),
    ``"scan"``, ``"lp"`` or ``"subgradient"``. ``max_iter`` and ``step_size``
    apply to the subgradient method, whose steps are ``step_size/sqrt(t)``
    along the normalized subgradient. ``tol=None`` selects
    ``1e-6 * (1 + median feature-row norm)``. All methods are deterministic;
    ``seed`` is recorded for provenance only.
    """

    method: str = "auto"
    max_iter: int = 20_000
    step_size: float = 1.0
    tol: float | None = None
    warm_start: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("auto", "scan", "lp", "subgradient"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one calibration solve.

    ``status`` is ``"optimal"``, ``"infinite"`` (the objective decreases
    without bound so the test threshold is +-inf), ``"max_iter"`` or
    ``"failed"``. ``threshold`` is the fitted threshold at the test feature.
    """

    theta_hat: np.ndarray
    stationarity_residual: float
    objective: float
    iterations: int
    converged: bool
    status: str = "optimal"
    threshold: float = math.nan
    tol: float = math.nan
    method: str = ""
    error: str | None = None

    @classmethod
    def failed(cls, d: int, message: str) -> "FitResult":
        return cls(np.full(d, np.nan), math.inf, math.nan, 0, False, "failed", math.nan, math.nan, "", message)


def _as_vector(x, d: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.size != d:
        raise ValueError(f"{name} has dimension {v.size}, expected {d}")
    return v


def objective_value(theta, calib: CalibrationSet, test_feature, alpha: float, reg: Regularizer | None = None) -> float:
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    theta = _as_vector(theta, calib.d, "theta")
    phi_t = _as_vector(test_feature, calib.d, "test_feature")
    u = calib.features @ theta
    total = calib.antiderivatives(u, alpha).sum() + (1.0 - alpha) * float(phi_t @ theta)
    return total / (calib.n + 1) + reg.value(theta)


def objective_subgradient(theta, calib: CalibrationSet, test_feature, alpha: float, reg: Regularizer | None = None) -> np.ndarray:
    """A subgradient of the objective, using left loss values at breakpoints."""
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    theta = _as_vector(theta, calib.d, "theta")
    phi_t = _as_vector(test_feature, calib.d, "test_feature")
    slopes = calib.loss_values(calib.features @ theta) - alpha
    g = calib.features.T @ slopes + (1.0 - alpha) * phi_t
    return g / (calib.n + 1) + reg.gradient(theta)


def _sample_intervals(calib: CalibrationSet, theta: np.ndarray, alpha: float):
    """Per-sample derivative brackets ``[lo_i, hi_i]`` of ``I_i`` at ``phi_i @ theta``.

    A breakpoint within ``KINK_TOL`` (relative) of ``u_i`` counts as a kink.
    """
    u = calib.features @ theta
    uo = u[calib._owner]
    gap = uo - calib._bp
    tol = KINK_TOL * (1.0 + np.abs(calib._bp) + np.abs(uo))
    above = np.bincount(calib._owner, calib._jump * (gap > tol), minlength=calib.n)
    touch = np.bincount(calib._owner, calib._jump * (gap >= -tol), minlength=calib.n)
    return calib._v0 + above - alpha, calib._v0 + touch - alpha


def _min_norm_subgradient(calib, theta, phi_t, alpha, reg, hint=None) -> float:
    """Norm of a small element of the subdifferential at ``theta``.

    Each sample contributes ``phi_i * t_i`` with ``t_i`` in its bracket. When
    solver multipliers are given they are clipped into the brackets; if that
    does not certify stationarity, or no hint exists, the exact minimum-norm
    element is found by bounded least squares.
    """
    lo, hi = _sample_intervals(calib, theta, alpha)
    n = calib.n
    F = calib.features
    fixed = (1.0 - alpha) * phi_t + (n + 1) * reg.gradient(theta)
    tol = calib.default_tol()
    best = math.inf
    if hint is not None:
        t = np.clip(hint, lo, hi)
        best = float(np.linalg.norm(F.T @ t + fixed)) / (n + 1)
        if best <= tol:
            return best
    active = hi > lo
    g0 = F[~active].T @ lo[~active] + fixed
    if not active.any():
        return min(best, float(np.linalg.norm(g0)) / (n + 1))
    A = F[active].T
    if calib.d == 1:
        a = A[0]
        low = g0[0] + np.sum(np.minimum(a * lo[active], a * hi[active]))
        high = g0[0] + np.sum(np.maximum(a * lo[active], a * hi[active]))
        dist = max(low, 0.0) + max(-high, 0.0)
        return min(best, dist / (n + 1))
    res = lsq_linear(A, -g0, bounds=(lo[active], hi[active]), method="bvls", tol=1e-12)
    return min(best, float(np.linalg.norm(A @ res.x + g0)) / (n + 1))


def predict_threshold(fit: FitResult, phi_x) -> float:
    theta = fit.theta_hat
    phi = _as_vector(phi_x, theta.size, "phi_x")
    if np.all(np.isfinite(theta)):
        return float(phi @ theta)
    terms = phi * theta
    terms[phi == 0] = 0.0
    return float(np.sum(terms))


def _finish(calib, phi_t, alpha, reg, theta, status, iterations, method, tol, hint=None, threshold=None):
    """Assemble a FitResult, recomputing objective and residual from theta."""
    if status == "infinite":
        if threshold is None:
            threshold = predict_threshold(
                FitResult(theta, math.inf, math.nan, 0, False), phi_t
            )
        return FitResult(
            theta_hat=theta,
            stationarity_residual=math.inf,
            objective=-math.inf,
            iterations=iterations,
            converged=False,
            status="infinite",
            threshold=float(threshold),
            tol=tol,
            method=method,
        )
    residual = _min_norm_subgradient(calib, theta, phi_t, alpha, reg, hint)
    converged = residual <= tol
    if status == "optimal" and not converged:
        status = "max_iter" if method == "subgradient" else "optimal"
    return FitResult(
        theta_hat=theta,
        stationarity_residual=residual,
        objective=objective_value(theta, calib, phi_t, alpha, reg),
        iterations=iterations,
        converged=converged,
        status=status,
        threshold=float(phi_t @ theta),
        tol=tol,
        method=method,
    )


def _pick_method(cfg: SolverConfig, calib: CalibrationSet) -> str:
    if cfg.method != "auto":
        if cfg.method == "scan" and calib.d != 1:
            raise ValueError("the scan solver needs a one-dimensional feature map")
        return cfg.method
    return "scan" if calib.d == 1 else "lp"


def _make_solver(method, calib, alpha, reg, cfg):
    from . import _solvers

    if method == "scan":
        return _solvers.ScanSolver(calib, alpha, reg)
    if method == "lp":
        return _solvers.HighsSolver(calib, alpha, reg)
    return _solvers.SubgradientSolver(calib, alpha, reg, cfg)


def _solve_one(solver, method, calib, phi_t, alpha, reg, tol) -> FitResult:
    out = solver.solve(phi_t)
    return _finish(
        calib, phi_t, alpha, reg, out.theta, out.status, out.iterations, method, tol,
        hint=out.hint, threshold=out.threshold,
    )


def fit_threshold_function(
    calib: CalibrationSet,
    test_feature,
    alpha: float,
    reg: Regularizer | None = None,
    cfg: SolverConfig | None = None,
) -> FitResult:
    """Minimise the calibration objective for one test feature.

    When several minimizers exist the one with the largest test threshold
    (smallest prediction set) is returned, which for the intercept class is
    the usual conformal order statistic.
    """
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    cfg = cfg or SolverConfig()
    phi_t = _as_vector(test_feature, calib.d, "test_feature")
    if np.any(np.all(calib.features == 0, axis=0)):
        warnings.warn("feature matrix has an all-zero column", RuntimeWarning, stacklevel=2)
    method = _pick_method(cfg, calib)
    tol = cfg.tol if cfg.tol is not None else calib.default_tol()
    solver = _make_solver(method, calib, alpha, reg, cfg)
    return _solve_one(solver, method, calib, phi_t, alpha, reg, tol)


def calibrate_batch(
    calib: CalibrationSet,
    test_features,
    alpha: float,
    reg: Regularizer | None = None,
    cfg: SolverConfig | None = None,
    warm_start: bool = True,
    threads: int = 1,
) -> list[FitResult]:
    """Solve one problem per test row.

    Identical rows are solved once and share their result. Distinct rows are
    visited in lexicographic order; with ``warm_start`` each solve starts from
    the previous solver state, otherwise every solve starts cold. A failing
    row yields a ``FitResult`` with status ``"failed"`` instead of aborting.
    """
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    cfg = cfg or SolverConfig()
    T = np.asarray(test_features, dtype=np.float64)
    if T.ndim == 1:
        T = T.reshape(-1, calib.d) if calib.d > 1 else T.reshape(-1, 1)
    if T.ndim != 2 or T.shape[1] != calib.d:
        raise ValueError(f"test features must have {calib.d} columns")
    if T.shape[0] == 0:
        return []
    uniq, inverse = np.unique(T, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    method = _pick_method(cfg, calib)
    tol = cfg.tol if cfg.tol is not None else calib.default_tol()

    def run_chunk(rows: np.ndarray) -> list[FitResult]:
        out = []
        solver = None
        for phi_t in rows:
            try:
                if solver is None or not warm_start:
                    solver = _make_solver(method, calib, alpha, reg, cfg)
                out.append(_solve_one(solver, method, calib, phi_t, alpha, reg, tol))
            except Exception as exc:  # recorded per item, batch continues
                solver = None
                out.append(FitResult.failed(calib.d, f"{type(exc).__name__}: {exc}"))
        return out

    threads = max(1, min(int(threads), len(uniq)))
    if threads == 1:
        solved = run_chunk(uniq)
    else:
        chunks = np.array_split(uniq, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = [r for part in pool.map(run_chunk, chunks) for r in part]
    return [solved[i] for i in inverse]


@dataclass(frozen=True)
class DirectionalBounds:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        """Signed distance from 0 to ``[lower, upper]`` (0 when it contains 0)."""
        return np.where(self.lower > 0, self.lower, np.where(self.upper < 0, self.upper, 0.0))


def directional_bounds(fit, calib, test_feature, alpha, reg=None, directions=()) -> DirectionalBounds:
    """Range of the directional derivative condition over the subdifferential.

    For each nonnegative direction ``w`` (``phi @ w >= 0`` on all calibration
    and test features) returns the interval of

        (1/(n+1)) * [sum_i lambda_i (l_i - alpha) + (1-alpha) lambda_t] + r(w)

    as each ``l_i`` ranges between its left value and right limit at the fit.
    """
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    phi_t = _as_vector(test_feature, calib.d, "test_feature")
    theta = fit.theta_hat
    if not np.all(np.isfinite(theta)):
        raise ValueError("certificate undefined for a non-finite fit")
    W = np.asarray(directions, dtype=np.float64)
    if W.ndim == 1:
        W = W.reshape(1, -1)
    if W.size == 0:
        return DirectionalBounds(np.zeros(0), np.zeros(0))
    if W.shape[1] != calib.d:
        raise ValueError(f"directions must have {calib.d} columns")
    lam = calib.features @ W.T
    lam_t = phi_t @ W.T
    scale = 1e-12 * (1.0 + np.abs(W).sum(axis=1) * (1.0 + np.abs(calib.features).max()))
    if np.any(lam < -scale) or np.any(lam_t < -scale):
        raise ValueError("direction takes negative weight at some point")
    lam = np.maximum(lam, 0.0)
    lam_t = np.maximum(lam_t, 0.0)
    lo, hi = _sample_intervals(calib, theta, alpha)
    n1 = calib.n + 1
    r = reg.strength * (W @ theta)
    base = (1.0 - alpha) * lam_t
    return DirectionalBounds((lo @ lam + base) / n1 + r, (hi @ lam + base) / n1 + r)


def stationarity_certificate(fit, calib, test_feature, alpha, reg=None, directions=()) -> np.ndarray:
    """Directional stationarity residuals, one per direction.

    Zero means the first-order condition holds exactly in that direction for
    some admissible choice of subgradients; a fit certifies the tilted-risk
    bound for ``w`` when ``|residual| <= tol``.
    """
    return directional_bounds(fit, calib, test_feature, alpha, reg, directions).residual


def marginal_crc_threshold(losses: Sequence[StepLoss], alpha: float) -> float:
    """Largest ``u`` with ``(sum_i l_i(u) + 1) / (n + 1) <= alpha``.

    Raises InfeasibleLevelError when ``alpha <= 1/(n+1)``. Returns ``-inf``
    when the inequality fails everywhere and ``+inf`` when it never binds.
    """
    alpha = check_alpha(alpha)
    losses = list(losses)
    n = len(losses)
    if n < 1:
        raise ValueError("need at least one loss")
    if alpha <= 1.0 / (n + 1):
        raise InfeasibleLevelError(f"alpha={alpha} <= 1/(n+1) for n={n}")
    budget = alpha * (n + 1)
    slack = 1e-12 * (n + 1)
    level = sum(l.values[0] for l in losses) + 1.0
    if level > budget + slack:
        return -math.inf
    bp = np.concatenate([l.breakpoints for l in losses])
    if bp.size == 0:
        return math.inf
    jumps = np.concatenate([l.jumps for l in losses])
    pos, inv = np.unique(bp, return_inverse=True)
    after = level + np.cumsum(np.bincount(inv.reshape(-1), jumps, minlength=pos.size))
    over = np.flatnonzero(after > budget + slack)
    return math.inf if over.size == 0 else float(pos[over[0]])


def guarantee_bound(alpha: float, reg: Regularizer | None, fit: FitResult, direction, mean_weight: float) -> float:
    """Certified tilted-risk level ``alpha - r(w) / E[phi @ w]`` for direction ``w``."""
    alpha = check_alpha(alpha)
    reg = reg or NO_REGULARIZER
    if not mean_weight > 0:
        raise ValueError("mean_weight must be positive")
    w = _as_vector(direction, fit.theta_hat.size, "direction")
    return alpha - reg.directional(fit.theta_hat, w) / mean_weight
