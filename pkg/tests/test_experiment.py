import math

import numpy as np
import pytest

from aacrc.config import ConfigError, RunConfig, apply_overrides
from aacrc.experiment import random_directions, run_experiment


def small(task="regression", **overrides):
    base = {"split.repetitions": 1, "split.calibration": 400, "split.test": 400, "split.residual": 200, "n_directions": 5}
    if task == "segmentation":
        base.update({"segmentation.count": 60, "segmentation.d1": 16, "segmentation.d2": 16, "split.calibration": 40, "split.test": 20, "split.residual": 0})
    base.update(overrides)
    return apply_overrides(RunConfig(task=task), base)


def test_intercept_risk_near_alpha():
    report = run_experiment(small(function_class="intercept", **{"split.calibration": 2000, "split.test": 2000}))
    rec = report.records[0]
    se = math.sqrt(0.1 * 0.9 / 2000)
    assert rec.status == "ok"
    assert abs(rec.marginal_risk - 0.1) <= 3 * se + 1 / 2001
    # the intercept fit is the marginal conformal threshold
    assert rec.mean_width == pytest.approx(rec.baseline_width)
    assert rec.certificate_violations == 0


def test_identical_seeds_identical_reports():
    cfg = small(function_class="groups", **{"split.repetitions": 2})
    assert run_experiment(cfg).to_json() == run_experiment(cfg).to_json()


def test_seed_changes_report():
    a = run_experiment(small(function_class="groups", seed=1))
    b = run_experiment(small(function_class="groups", seed=2))
    assert a.records[0].marginal_risk != b.records[0].marginal_risk


def test_rf_leaf_pools_groups():
    cfg = small(function_class="rf-leaf", refit_feature_map=False, **{"forest.n_trees": 3, "forest.max_depth": 2, "split.repetitions": 2})
    report = run_experiment(cfg)
    assert all(r.status == "ok" for r in report.records)
    assert report.pooled_group_risk
    assert all(0 <= risk <= 1 for risk, _ in report.pooled_group_risk.values())


def test_segmentation_embedding():
    report = run_experiment(small("segmentation"))
    rec = report.records[0]
    assert rec.status == "ok"
    assert 0 <= rec.recall_mean <= 1 and 0 <= rec.precision_mean <= 1
    assert rec.spearman_rho is not None
    assert len(report.recall_bins) == 10


def test_segmentation_rf_leaf_needs_residual_split():
    with pytest.raises(ConfigError):
        run_experiment(small("segmentation", function_class="rf-leaf"))


def test_random_directions_nonnegative(rng):
    cols = np.array([True, False, True, True] * 5)
    W = random_directions(rng, cols, 7)
    assert W.shape == (7, 20)
    assert np.all(W >= 0) and np.all(W[:, ~cols] == 0)
    assert np.all((W > 0).sum(axis=1) == 2)
    assert random_directions(rng, np.zeros(3, dtype=bool), 4).shape == (0, 3)
