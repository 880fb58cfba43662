"""Repeated-split experiments for the regression and segmentation tasks.

Each repetition draws its own seed from the master seed, builds (or reuses)
the feature map, calibrates every test point, evaluates the resulting sets
and runs the constant-threshold baseline on the same split.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from ._seeding import child_seed, make_rng
from .config import ConfigError, RunConfig
from .engine import CalibrationSet, calibrate_batch, directional_bounds, marginal_crc_threshold
from .evaluation import EvalReport, RepetitionRecord, group_risks, recall_bins, spearman, tilted_risk
from .features import FeatureMap, IntervalGroups, Intercept, LinearEmbedding, RFLeaf, pca_fit
from .forest import rf_fit
from .loss import crossing_threshold
from .sim import SplitPlan, synth_regression_generate, synth_segmentation_generate
from .tasks import interval_loss, mask_metrics, recall_loss

log = logging.getLogger(__name__)

# share of nonnegative columns each random direction puts weight on
DIRECTION_DENSITY = 0.1


def random_directions(rng: np.random.Generator, nonneg_columns: np.ndarray, count: int) -> np.ndarray:
    """Sparse random directions supported on columns that are nonnegative everywhere.

    Each direction puts exponential weights on a random tenth (at least one)
    of the admissible columns, so ``phi(x) @ w >= 0`` for every record.
    """
    cols = np.flatnonzero(nonneg_columns)
    W = np.zeros((count, nonneg_columns.size))
    if cols.size == 0:
        return W[:0]
    k = max(1, int(round(DIRECTION_DENSITY * cols.size)))
    for j in range(count):
        pick = rng.choice(cols, size=k, replace=False)
        W[j, pick] = rng.exponential(size=k)
    return W


@dataclass
class CalibrationOutcome:
    thresholds: np.ndarray  # internal orientation, one per test row
    fits: list
    stats: dict


def calibrate_and_certify(cfg: RunConfig, F_cal, losses, F_test, directions) -> CalibrationOutcome:
    """Fit every test row and check directional stationarity of the distinct fits."""
    calib = CalibrationSet(F_cal, losses)
    reg = cfg.regularizer.build()
    fits = calibrate_batch(
        calib,
        F_test,
        cfg.alpha,
        reg,
        cfg.solver.build(cfg.seed),
        warm_start=cfg.solver.warm_start,
        threads=cfg.solver.threads,
    )
    thresholds = np.array([f.threshold for f in fits])
    _, first = np.unique(F_test, axis=0, return_index=True)
    worst = 0.0
    violations = 0
    n_conv = n_inf = n_fail = 0
    for i in first:
        fit = fits[i]
        n_conv += fit.converged
        n_inf += fit.status == "infinite"
        n_fail += fit.status == "failed"
        if not fit.converged or len(directions) == 0:
            continue
        res = directional_bounds(fit, calib, F_test[i], cfg.alpha, reg, directions).residual
        ratio = float(np.max(np.abs(res))) / fit.tol
        worst = max(worst, ratio)
        violations += ratio > 1.0
    stats = dict(
        n_fits=len(first),
        n_converged=int(n_conv),
        n_infinite=int(n_inf),
        n_failed=int(n_fail),
        max_residual_ratio=worst,
        certificate_violations=int(violations),
    )
    return CalibrationOutcome(thresholds, fits, stats)


def _tilted(directions, F_test, losses) -> list:
    out = []
    for w in directions:
        lam = np.maximum(F_test @ w, 0.0)
        out.append(tilted_risk(lam, losses) if lam.sum() > 0 else math.nan)
    return out


def _is_indicator(fmap: FeatureMap) -> bool:
    return isinstance(fmap, (IntervalGroups, RFLeaf))


class _Pool:
    """Per-group loss sums across repetitions sharing one feature map."""

    def __init__(self):
        self.sums = None
        self.counts = None

    def add(self, G, losses):
        s = losses @ G
        c = G.sum(axis=0)
        if self.sums is None:
            self.sums, self.counts = s, c
        else:
            self.sums = self.sums + s
            self.counts = self.counts + c

    def table(self):
        if self.sums is None:
            return None
        return {
            str(j): [float(self.sums[j] / self.counts[j]), int(self.counts[j])]
            for j in np.flatnonzero(self.counts)
        }


class _RegressionRunner:
    def __init__(self, cfg: RunConfig, plan: SplitPlan):
        self.cfg = cfg
        self.plan = plan
        self.pool = _Pool()
        self.fixed = None
        if not cfg.refit_feature_map:
            self.fixed = self._feature_setup(plan.feature_map_seed)

    def _feature_setup(self, seed):
        cfg = self.cfg
        if cfg.function_class == "intercept":
            fmap = Intercept()
        elif cfg.function_class == "groups":
            fmap = IntervalGroups(cfg.group_edges, include_all=True)
        else:
            res = synth_regression_generate(self.plan.residual, child_seed(seed, 0))
            params = replace(cfg.forest, seed=child_seed(seed, 1))
            fmap = RFLeaf(rf_fit(res.x.reshape(-1, 1), np.abs(res.y - res.f_hat), params))
        dirs = random_directions(make_rng(child_seed(seed, 4)), np.ones(fmap.dim, dtype=bool), self.cfg.n_directions)
        return fmap, dirs

    def run(self, rep: int, seed: int) -> RepetitionRecord:
        cfg = self.cfg
        fmap, dirs = self.fixed or self._feature_setup(seed)
        cal = synth_regression_generate(self.plan.calibration, child_seed(seed, 2))
        test = synth_regression_generate(self.plan.test, child_seed(seed, 3))
        F_cal = fmap.featurize_many(cal.x.reshape(-1, 1))
        F_test = fmap.featurize_many(test.x.reshape(-1, 1))
        losses = [interval_loss(p, y) for p, y in zip(cal.f_hat, cal.y)]
        out = calibrate_and_certify(cfg, F_cal, losses, F_test, dirs)
        u = out.thresholds
        r_test = np.abs(test.y - test.f_hat)
        miss = (u > -r_test).astype(np.float64)
        base_u = marginal_crc_threshold(losses, cfg.alpha)
        base_miss = (base_u > -r_test).astype(np.float64)
        widths = np.maximum(-u, 0.0)
        rec = RepetitionRecord(rep=rep, seed=seed, **out.stats)
        rec.infinite_fraction = float(np.mean(~np.isfinite(u)))
        rec.marginal_risk = float(miss.mean())
        rec.baseline_marginal_risk = float(base_miss.mean())
        rec.mean_width = float(widths[np.isfinite(widths)].mean()) if np.isfinite(widths).any() else math.inf
        rec.baseline_width = max(-base_u, 0.0)
        rec.tilted_risks = _tilted(dirs, F_test, miss)
        if _is_indicator(fmap):
            G = F_test.astype(bool)
            rec.per_group_risk = group_risks(G, miss).risks
            if self.fixed is not None:
                self.pool.add(F_test, miss)
        return rec

    def extras(self) -> dict:
        return {"pooled_group_risk": self.pool.table()}


class _SegmentationRunner:
    def __init__(self, cfg: RunConfig, plan: SplitPlan):
        self.cfg = cfg
        self.plan = plan
        seg = cfg.segmentation
        self.data = synth_segmentation_generate(seg.count, seg.d1, seg.d2, cfg.seed, seg.generator)
        self.losses = [recall_loss(s) for s in self.data.samples]
        self.pool = _Pool()
        self.bin_recall = []
        self.bin_threshold = []
        self.fixed = None
        if not cfg.refit_feature_map:
            perm = make_rng(plan.feature_map_seed).permutation(len(self.data))
            self.fixed = self._feature_setup(plan.feature_map_seed, perm[: self._n_residual()], np.arange(len(self.data)))
            self.held_out = perm[: self._n_residual()]

    def _n_residual(self) -> int:
        return self.plan.residual if self.cfg.function_class == "rf-leaf" else 0

    def _feature_setup(self, seed, residual_idx, pool_idx):
        cfg = self.cfg
        emb = self.data.embedding
        if cfg.function_class == "intercept":
            fmap = Intercept()
        elif cfg.function_class == "embedding":
            pca = pca_fit(emb[pool_idx], cfg.pca_target) if cfg.pca_target is not None else None
            fmap = LinearEmbedding(emb.shape[1], pca, cfg.append_intercept)
        else:
            target = np.array([crossing_threshold(self.losses[i], cfg.alpha) for i in residual_idx])
            target = np.clip(target, 0.0, 1.0)
            params = replace(cfg.forest, seed=child_seed(seed, 1))
            fmap = RFLeaf(rf_fit(emb[residual_idx], target, params))
        nonneg = np.all(fmap.featurize_many(emb) >= 0, axis=0)
        dirs = random_directions(make_rng(child_seed(seed, 4)), nonneg, cfg.n_directions)
        return fmap, dirs

    def run(self, rep: int, seed: int) -> RepetitionRecord:
        cfg = self.cfg
        n_cal, n_test = self.plan.calibration, self.plan.test
        if self.fixed is not None:
            fmap, dirs = self.fixed
            rest = np.setdiff1d(np.arange(len(self.data)), self.held_out)
            order = rest[make_rng(seed).permutation(rest.size)]
            cal_idx, test_idx = order[:n_cal], order[n_cal : n_cal + n_test]
        else:
            perm = make_rng(seed).permutation(len(self.data))
            r = self._n_residual()
            res_idx, cal_idx, test_idx = perm[:r], perm[r : r + n_cal], perm[r + n_cal : r + n_cal + n_test]
            fmap, dirs = self._feature_setup(seed, res_idx, np.r_[cal_idx, test_idx])
        emb = self.data.embedding
        F_cal = fmap.featurize_many(emb[cal_idx])
        F_test = fmap.featurize_many(emb[test_idx])
        cal_losses = [self.losses[i] for i in cal_idx]
        out = calibrate_and_certify(cfg, F_cal, cal_losses, F_test, dirs)
        t = out.thresholds
        base_t = marginal_crc_threshold(cal_losses, cfg.alpha)
        samples = [self.data.samples[i] for i in test_idx]
        ours = [mask_metrics(s.scores >= ti, s.mask) for s, ti in zip(samples, t)]
        base = [mask_metrics(s.scores >= base_t, s.mask) for s in samples]
        at_half = np.array([mask_metrics(s.scores >= 0.5, s.mask).recall for s in samples])
        loss = np.array([1.0 - m.recall for m in ours])
        rec = RepetitionRecord(rep=rep, seed=seed, **out.stats)
        rec.infinite_fraction = float(np.mean(~np.isfinite(t)))
        rec.marginal_risk = float(loss.mean())
        rec.baseline_marginal_risk = float(np.mean([1.0 - m.recall for m in base]))
        rec.recall_mean = float(np.mean([m.recall for m in ours]))
        rec.baseline_recall_mean = float(np.mean([m.recall for m in base]))
        rec.precision_mean = float(np.mean([m.precision for m in ours]))
        rec.baseline_precision_mean = float(np.mean([m.precision for m in base]))
        try:
            sp = spearman(t, at_half, seed=seed)
            rec.spearman_rho, rec.spearman_p = sp.rho, sp.p_value
        except ValueError:
            pass  # constant thresholds, e.g. the intercept class
        rec.tilted_risks = _tilted(dirs, F_test, loss)
        if _is_indicator(fmap):
            rec.per_group_risk = group_risks(F_test.astype(bool), loss).risks
            if self.fixed is not None:
                self.pool.add(F_test, loss)
        self.bin_recall.extend(at_half.tolist())
        self.bin_threshold.extend(t.tolist())
        return rec

    def extras(self) -> dict:
        return {
            "pooled_group_risk": self.pool.table(),
            "recall_bins": recall_bins(self.bin_recall, self.bin_threshold) if self.bin_recall else None,
        }


def run_experiment(cfg: RunConfig) -> EvalReport:
    """Run all repetitions; a failing repetition is recorded and skipped."""
    cfg = cfg.resolved().validate()
    plan = cfg.split_plan()
    if cfg.task == "segmentation" and cfg.function_class == "rf-leaf" and plan.residual < 2 * cfg.forest.min_samples_leaf:
        raise ConfigError("rf-leaf needs split.residual >= 2 * forest.min_samples_leaf")
    runner = (_RegressionRunner if cfg.task == "regression" else _SegmentationRunner)(cfg, plan)
    records = []
    for rep in range(plan.repetitions):
        seed = plan.repetition_seed(rep)
        try:
            rec = runner.run(rep, seed)
        except Exception as exc:  # recorded in the report
            log.warning("repetition %d failed: %s", rep, exc)
            rec = RepetitionRecord(rep=rep, seed=seed, status="failed", error=f"{type(exc).__name__}: {exc}")
        log.info("repetition %d done: risk=%s", rep, rec.marginal_risk)
        records.append(rec)
    return EvalReport(config=cfg.resolved().to_dict(), records=records, **runner.extras())
