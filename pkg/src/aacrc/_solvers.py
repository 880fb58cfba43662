"""Solver backends for the calibration objective.

* ``ScanSolver``: exact for one-dimensional features. The objective is a
  convex piecewise-linear (plus quadratic, for ridge) function of a scalar, so
  sorting the kink positions and accumulating slope jumps finds the minimizer
  directly.
* ``HighsSolver``: exact for any dimension. Without a regularizer the problem
  is solved through its dual linear program; with ridge the primal quadratic
  program is handed to HiGHS. The model is built once and only the
  test-dependent data change between solves, so consecutive solves restart
  from the previous basis.
* ``SubgradientSolver``: normalized subgradient descent with a ``c/sqrt(t)``
  schedule and best-iterate tracking. Slow and inexact, kept for comparison.

Every ``solve`` returns a ``SolveOutput``; residuals and objectives are
recomputed from ``theta`` by the engine so all backends are judged alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import highspy
import numpy as np
import scipy.sparse as sp
from scipy.linalg import qr

# Weight of the tie-break toward the largest test threshold, relative to 1 - alpha.
TIE_BREAK = 1e-6
# Box on each coordinate, relative to the breakpoint range; hitting it means
# the objective is unbounded below.
BOX_SCALE = 1e6


@dataclass
class SolveOutput:
    theta: np.ndarray
    status: str
    iterations: int
    hint: np.ndarray | None = None
    threshold: float | None = None


class ScanSolver:
    def __init__(self, calib, alpha, reg):
        phi = calib.features[:, 0]
        self.alpha = alpha
        self.n = calib.n
        self.gamma = (calib.n + 1) * reg.strength
        self.base = float(
            np.sum(np.where(phi > 0, phi * (calib._v0 - alpha), phi * (calib._vk - alpha)))
        )
        self.scale = float(np.abs(phi).sum())
        owner_phi = phi[calib._owner]
        keep = owner_phi != 0
        pos = calib._bp[keep] / owner_phi[keep]
        jump = np.abs(owner_phi[keep]) * calib._jump[keep]
        self.pos, inv = np.unique(pos, return_inverse=True)
        self.cum = np.cumsum(np.bincount(inv.reshape(-1), jump, minlength=self.pos.size))

    def solve(self, phi_t) -> SolveOutput:
        p = float(phi_t[0])
        s0 = self.base + (1.0 - self.alpha) * p
        # S[m] is the slope left of pos[m]; S[M] the slope after the last kink
        S = np.r_[s0, s0 + self.cum]
        pos = self.pos
        tol = 1e-10 * (self.scale + abs(p) + 1.0)
        if self.gamma > 0:
            theta = self._ridge(S, pos)
            return SolveOutput(np.array([theta]), "optimal", 1)
        if p >= 0:
            # largest minimizer: first kink after which the slope is positive
            if S[0] > tol:
                return self._infinite(-math.inf, p)
            m = int(np.searchsorted(S[1:], tol, side="right"))
            if m == pos.size:
                return self._infinite(math.inf, p)
            return SolveOutput(np.array([pos[m]]), "optimal", 1)
        # smallest minimizer gives the largest threshold when phi_t < 0
        if S[-1] < -tol:
            return self._infinite(math.inf, p)
        if S[0] >= -tol:
            return self._infinite(-math.inf, p)
        m = int(np.searchsorted(S[1:], -tol, side="left"))
        return SolveOutput(np.array([pos[m]]), "optimal", 1)

    def _ridge(self, S, pos) -> float:
        g = self.gamma
        right = S[1:] + g * pos
        m = int(np.searchsorted(right, 0.0, side="left"))
        if m == pos.size:
            return -S[-1] / g
        if S[m] + g * pos[m] <= 0.0:
            return float(pos[m])
        return -S[m] / g

    @staticmethod
    def _infinite(theta, p) -> SolveOutput:
        threshold = 0.0 if p == 0 else math.copysign(math.inf, theta * p)
        return SolveOutput(np.array([theta]), "infinite", 1, threshold=threshold)


def _new_highs() -> highspy.Highs:
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("primal_feasibility_tolerance", 1e-10)
    h.setOptionValue("dual_feasibility_tolerance", 1e-10)
    h.setOptionValue("threads", 1)
    h.setOptionValue("qp_regularization_value", 0.0)
    return h


class HighsSolver:
    """Exact solver via HiGHS; dual LP without regularizer, primal QP with ridge.

    Without a regularizer the LP works on a subset of feature columns that
    is a basis of the calibration column space. Any coefficient vector has a
    counterpart on that subset with the same calibration thresholds, and the
    same test threshold whenever the test feature lies in the calibration row
    space, so nothing is lost; flat directions disappear and the duals stay
    well scaled. A test feature outside the row space makes the objective
    unbounded below.
    """

    def __init__(self, calib, alpha, reg):
        self.calib = calib
        self.alpha = alpha
        self.d = calib.d
        self.gamma = (calib.n + 1) * reg.strength
        F = calib.features
        if self.gamma > 0:
            self.cols = np.arange(self.d)
            self.row_basis = None
        else:
            self.cols, self.row_basis = _column_basis(F)
        self.F = F[:, self.cols]
        self.g0 = self.F.T @ (calib._v0 - alpha)
        bp_scale = 1.0 + (float(np.abs(calib._bp).max()) if calib._bp.size else 0.0)
        nz = np.abs(self.F[self.F != 0])
        self.box = BOX_SCALE * bp_scale / min(1.0, float(np.median(nz)) if nz.size else 1.0)
        self.bp_scale = bp_scale
        self.h = _new_highs()
        if self.gamma > 0:
            self._build_qp()
        else:
            self._build_lp()

    def _hinge_matrix(self) -> sp.csc_matrix:
        """Columns ``phi_owner`` for every breakpoint, shape ``(r, K)``."""
        return sp.csc_matrix(self.F[self.calib._owner].T)

    def _build_lp(self):
        c = self.calib
        r = self.cols.size
        A = sp.hstack([self._hinge_matrix(), sp.identity(r), -sp.identity(r)], format="csc")
        K = c._bp.size
        lp = highspy.HighsLp()
        lp.num_col_ = K + 2 * r
        lp.num_row_ = r
        lp.col_cost_ = np.r_[c._bp, np.full(2 * r, self.box)]
        lp.col_lower_ = np.zeros(K + 2 * r)
        lp.col_upper_ = np.r_[c._jump, np.full(2 * r, highspy.kHighsInf)]
        lp.row_lower_ = np.zeros(r)
        lp.row_upper_ = np.zeros(r)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = A.indptr
        lp.a_matrix_.index_ = A.indices
        lp.a_matrix_.value_ = A.data
        self.h.passModel(lp)
        self.K = K

    def _build_qp(self):
        # variables [theta (d, free), z (K, >= 0)]; rows z_j - phi_owner @ theta >= -b_j
        c = self.calib
        d = self.d
        K = c._bp.size
        A = sp.hstack([-self._hinge_matrix().T, sp.identity(K)], format="csc")
        model = highspy.HighsModel()
        lp = model.lp_
        lp.num_col_ = d + K
        lp.num_row_ = K
        lp.col_cost_ = np.r_[self.g0, c._jump]
        lp.col_lower_ = np.r_[np.full(d, -highspy.kHighsInf), np.zeros(K)]
        lp.col_upper_ = np.full(d + K, highspy.kHighsInf)
        lp.row_lower_ = -c._bp
        lp.row_upper_ = np.full(K, highspy.kHighsInf)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = A.indptr
        lp.a_matrix_.index_ = A.indices
        lp.a_matrix_.value_ = A.data
        hess = model.hessian_
        hess.dim_ = d + K
        hess.format_ = highspy.HessianFormat.kTriangular
        hess.start_ = np.r_[np.arange(d + 1), np.full(K, d)].astype(np.int32)
        hess.index_ = np.arange(d, dtype=np.int32)
        hess.value_ = np.full(d, self.gamma)
        self.h.passModel(model)
        self.K = K

    def _hint(self, mu: np.ndarray) -> np.ndarray:
        c = self.calib
        mu = np.clip(mu, 0.0, c._jump)
        return c._v0 - self.alpha + np.bincount(c._owner, mu, minlength=c.n)

    def _run(self):
        h = self.h
        h.run()
        if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
            # a warm basis occasionally stalls numerically; retry from scratch
            h.clearSolver()
            h.run()
        status = h.getModelStatus()
        if status != highspy.HighsModelStatus.kOptimal:
            raise RuntimeError(f"HiGHS returned {h.modelStatusToString(status)}")
        return h.getSolution(), int(h.getInfo().simplex_iteration_count)

    def solve(self, phi_t) -> SolveOutput:
        phi_t = np.asarray(phi_t, dtype=np.float64)
        r = self.cols.size
        idx = np.arange(r, dtype=np.int32)
        if self.gamma > 0:
            self.h.changeColsCost(r, idx, self.g0 + (1.0 - self.alpha) * phi_t)
            sol, iters = self._run()
            theta = np.asarray(sol.col_value)[: self.d].copy()
            return SolveOutput(theta, "optimal", iters, hint=self._hint(np.asarray(sol.row_dual)))
        B = self.row_basis
        off_span = phi_t - B.T @ (B @ phi_t)
        if np.linalg.norm(off_span) > 1e-9 * (1.0 + np.linalg.norm(phi_t)):
            # moving along the calibration null space lowers the test term forever
            return SolveOutput(np.full(self.d, np.nan), "infinite", 0, threshold=-math.inf)
        slope = (1.0 - self.alpha) * (1.0 - TIE_BREAK)
        rhs = -(self.g0 + slope * phi_t[self.cols])
        self.h.changeRowsBounds(r, idx, rhs, rhs)
        sol, iters = self._run()
        theta = np.zeros(self.d)
        theta[self.cols] = np.asarray(sol.row_dual)
        x = np.asarray(sol.col_value)
        hint = self._hint(x[: self.K])
        if np.any(x[self.K :] > 1e-9):
            t = float(phi_t @ theta)
            # finite optima sit at breakpoints, so far-out thresholds are box artifacts
            if abs(t) > 1e3 * self.bp_scale:
                t = math.copysign(math.inf, t)
            return SolveOutput(theta, "infinite", iters, hint=hint, threshold=t)
        return SolveOutput(theta, "optimal", iters, hint=hint)


def _column_basis(F: np.ndarray):
    """Pivoted-QR choice of linearly independent columns and an orthonormal
    basis of the row space (computed on the distinct rows only)."""
    U = np.unique(F, axis=0)
    _, s, vt = np.linalg.svd(U, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(U.shape) * np.finfo(float).eps * 16)) if s.size and s[0] > 0 else 0
    rank = max(rank, 1)
    _, _, piv = qr(U, mode="economic", pivoting=True)
    return np.sort(piv[:rank]), vt[:rank]


class SubgradientSolver:
    def __init__(self, calib, alpha, reg, cfg):
        self.calib = calib
        self.alpha = alpha
        self.reg = reg
        self.cfg = cfg

    def solve(self, phi_t) -> SolveOutput:
        from .engine import objective_subgradient, objective_value

        c, a, reg, cfg = self.calib, self.alpha, self.reg, self.cfg
        theta = np.zeros(c.d) if cfg.warm_start is None else np.asarray(cfg.warm_start, dtype=np.float64).copy()
        if theta.shape != (c.d,):
            raise ValueError(f"warm_start must have shape ({c.d},)")
        best = theta.copy()
        best_val = objective_value(theta, c, phi_t, a, reg)
        it = 0
        for it in range(1, cfg.max_iter + 1):
            g = objective_subgradient(theta, c, phi_t, a, reg)
            norm = float(np.linalg.norm(g))
            if norm == 0.0:
                best = theta.copy()
                break
            theta = theta - (cfg.step_size / math.sqrt(it)) * g / norm
            val = objective_value(theta, c, phi_t, a, reg)
            if val < best_val:
                best_val = val
                best = theta.copy()
        return SolveOutput(best, "optimal", it)
