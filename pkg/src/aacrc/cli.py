"""Command-line front end.

Subcommands::

    aacrc simulate      write synthetic calibration/test (and residual) splits
    aacrc rf-embed      train a leaf-group forest and write leaf-indicator embeddings
    aacrc calibrate     per-record thresholds plus a stationarity certificate
    aacrc evaluate      JSON/CSV report for thresholds against ground truth
    aacrc experiment    repeated-split experiment straight from a config
    aacrc config dump-defaults | validate

Settings come from the built-in defaults, then ``--config FILE``, then
flags. Exit codes: 0 ok, 2 config error, 3 data error, 4 certificate failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._seeding import child_seed, make_rng
from .config import ConfigError, RunConfig, apply_overrides
from .engine import CalibrationSet, InfeasibleLevelError, calibrate_batch, marginal_crc_threshold
from .evaluation import EvalReport, RepetitionRecord, recall_bins, spearman
from .experiment import run_experiment
from .features import DegenerateDataError, IntervalGroups, LinearEmbedding, RFLeaf, pca_fit
from .forest import RandomForest, rf_fit
from .formats import (
    DataFormatError,
    check_unique_ids,
    read_embedding,
    read_feature_table,
    read_regression_csv,
    read_residual_csv,
    read_segmentation,
    read_thresholds,
    update_manifest,
    write_certificate,
    write_embedding,
    write_regression_csv,
    write_residual_csv,
    write_segmentation_bin,
    write_segmentation_csv,
    write_thresholds,
)
from .loss import crossing_threshold
from .sim import synth_regression_generate, synth_segmentation_generate
from .tasks import Orientation, interval_loss, mask_metrics, recall_loss, to_native

log = logging.getLogger("aacrc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CERTIFICATE = 4


class CertificateFailure(RuntimeError):
    pass


# configuration ----------------------------------------------------------------

# flag name -> dotted config key
_FLAG_KEYS = {
    "task": "task",
    "function_class": "function_class",
    "alpha": "alpha",
    "seed": "seed",
    "threads": "solver.threads",
    "method": "solver.method",
    "gamma": "regularizer.gamma",
    "n_residual": "split.residual",
    "n_calibration": "split.calibration",
    "n_test": "split.test",
    "repetitions": "split.repetitions",
    "count": "segmentation.count",
    "d1": "segmentation.d1",
    "d2": "segmentation.d2",
    "trees": "forest.n_trees",
    "max_depth": "forest.max_depth",
    "min_samples_leaf": "forest.min_samples_leaf",
    "pca_target": "pca_target",
}


def load_config(args) -> RunConfig:
    """Defaults, then ``--config``, then any flag that was given."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg = RunConfig.from_json(text)
    overrides = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "gamma", None) is not None:
        overrides["regularizer.kind"] = "ridge" if args.gamma > 0 else "none"
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.resolved().validate()


def _run_seed(cfg: RunConfig) -> int:
    # the single-run commands reproduce repetition 0 of an experiment
    return cfg.split_plan().repetition_seed(0)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create {out}: {exc}") from exc
    return out


def _orientation(task: str) -> Orientation:
    return Orientation.GROWING if task == "regression" else Orientation.SHRINKING


# simulate -----------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    plan = cfg.split_plan()
    seed = _run_seed(cfg)
    files = {}
    if cfg.task == "regression":
        if plan.residual > 0:
            res = synth_regression_generate(plan.residual, child_seed(seed, 0))
            write_residual_csv(out / "residual.csv", np.arange(len(res)), res.x, np.abs(res.y - res.f_hat))
            files["residual.csv"] = "residual-csv"
        for name, key in (("calibration", 2), ("test", 3)):
            n = plan.calibration if name == "calibration" else plan.test
            data = synth_regression_generate(n, child_seed(seed, key))
            write_regression_csv(out / f"{name}.csv", np.arange(n), data.x, data.y, data.f_hat)
            files[f"{name}.csv"] = "regression-csv"
    else:
        seg = cfg.segmentation
        need = plan.residual + plan.calibration + plan.test
        if need > seg.count:
            raise ConfigError(f"splits need {need} images but count is {seg.count}")
        data = synth_segmentation_generate(seg.count, seg.d1, seg.d2, cfg.seed, seg.generator)
        perm = make_rng(seed).permutation(seg.count)
        r, c = plan.residual, plan.calibration
        parts = {"residual": perm[:r], "calibration": perm[r : r + c], "test": perm[r + c : need]}
        if r > 0:
            idx = parts["residual"]
            # forest targets: each image's own level-alpha crossing threshold
            target = [min(max(crossing_threshold(recall_loss(data.samples[i]), cfg.alpha), 0.0), 1.0) for i in idx]
            write_residual_csv(out / "residual.csv", np.arange(r), data.embedding[idx], target)
            files["residual.csv"] = "residual-csv"
        for name in ("calibration", "test"):
            idx = parts[name]
            samples = [data.samples[i] for i in idx]
            if args.format == "csv":
                write_segmentation_csv(out / f"{name}.seg.csv", samples, cfg.seed)
                files[f"{name}.seg.csv"] = "segmentation-csv"
            else:
                write_segmentation_bin(out / f"{name}.bin", samples, cfg.seed)
                files[f"{name}.bin"] = "segmentation-bin"
            write_embedding(out / f"{name}.emb", np.arange(idx.size), data.embedding[idx], seed=cfg.seed)
            files[f"{name}.emb"] = "embedding"
    update_manifest(out, "simulate", cfg.seed, files)
    for name in files:
        print(out / name)
    return EXIT_OK


# rf-embed -----------------------------------------------------------------------


def cmd_rf_embed(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    files = {}
    if args.model:
        try:
            forest = RandomForest.from_json(Path(args.model).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise DataFormatError(f"cannot load forest model: {exc}") from exc
    else:
        if not args.residual:
            raise ConfigError("rf-embed needs --residual or --model")
        _, X, target = read_residual_csv(args.residual)
        params = replace(cfg.forest, seed=child_seed(_run_seed(cfg), 1))
        forest = rf_fit(X, target, params)
        (out / "forest.json").write_text(forest.to_json())
        files["forest.json"] = "aacrc-forest"
    for path in args.inputs:
        ids, X = read_feature_table(path)
        check_unique_ids(ids, path)
        if X.shape[1] != forest.n_features:
            raise DataFormatError(f"{path}: {X.shape[1]} input columns but the forest expects {forest.n_features}")
        name = Path(path).name.split(".")[0] + ".leaf.emb"
        write_embedding(out / name, ids, RFLeaf(forest).featurize_many(X), seed=cfg.seed)
        files[name] = "embedding"
        print(out / name)
    update_manifest(out, "rf-embed", cfg.seed, files)
    return EXIT_OK


# calibrate ----------------------------------------------------------------------


def _load_records(task: str, path):
    """``(ids, losses-or-None-source, x)`` for a data file of the given task."""
    if task == "regression":
        t = read_regression_csv(path)
        return t.ids, t, t.x.reshape(-1, 1)
    split = read_segmentation(path)
    return split.ids, split, None


def _losses(task: str, data) -> list:
    if task == "regression":
        return [interval_loss(p, y) for p, y in zip(data.f_hat, data.y)]
    try:
        return [recall_loss(s) for s in data.samples]
    except ValueError as exc:
        raise DataFormatError(str(exc)) from exc


def _align(ids, path) -> np.ndarray:
    """Rows of the feature file at ``path`` ordered like ``ids``."""
    f_ids, F = read_embedding(path)
    check_unique_ids(f_ids, path)
    pos = {int(i): k for k, i in enumerate(f_ids)}
    missing = [int(i) for i in ids if int(i) not in pos]
    if missing:
        raise DataFormatError(f"{path}: no features for ids {missing[:5]}")
    return F[[pos[int(i)] for i in ids]]


def _feature_matrices(args, cfg: RunConfig, cal_ids, cal_x, test_ids, test_x):
    fc = cfg.function_class
    if fc == "intercept":
        return np.ones((cal_ids.size, 1)), np.ones((test_ids.size, 1))
    if fc == "groups":
        fmap = IntervalGroups(cfg.group_edges, include_all=True)
        return fmap.featurize_many(cal_x), fmap.featurize_many(test_x)
    if args.model:
        forest = RandomForest.from_json(Path(args.model).read_text())
        fmap = RFLeaf(forest)
        if args.cal_features:
            return fmap.featurize_many(_align(cal_ids, args.cal_features)), fmap.featurize_many(
                _align(test_ids, args.test_features)
            )
        if cal_x is None:
            raise ConfigError("--model on segmentation data needs --cal-features and --test-features")
        return fmap.featurize_many(cal_x), fmap.featurize_many(test_x)
    if not (args.cal_features and args.test_features):
        raise ConfigError(f"function class {fc!r} needs --cal-features and --test-features")
    F_cal = _align(cal_ids, args.cal_features)
    F_test = _align(test_ids, args.test_features)
    if F_cal.shape[1] != F_test.shape[1]:
        raise DataFormatError("calibration and test embeddings differ in dimension")
    if fc == "embedding":
        pca = pca_fit(np.vstack([F_cal, F_test]), cfg.pca_target) if cfg.pca_target is not None else None
        fmap = LinearEmbedding(F_cal.shape[1], pca, cfg.append_intercept)
        return fmap.featurize_many(F_cal), fmap.featurize_many(F_test)
    return F_cal, F_test


def cmd_calibrate(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    cal_ids, cal_data, cal_x = _load_records(cfg.task, args.calibration)
    test_ids, _, test_x = _load_records(cfg.task, args.test)
    check_unique_ids(cal_ids, args.calibration)
    check_unique_ids(test_ids, args.test)
    if cal_ids.size == 0 or test_ids.size == 0:
        raise DataFormatError("calibration and test splits must be nonempty")
    losses = _losses(cfg.task, cal_data)
    F_cal, F_test = _feature_matrices(args, cfg, cal_ids, cal_x, test_ids, test_x)
    calib = CalibrationSet(F_cal, losses)
    fits = calibrate_batch(
        calib,
        F_test,
        cfg.alpha,
        cfg.regularizer.build(),
        cfg.solver.build(cfg.seed),
        warm_start=cfg.solver.warm_start,
        threads=cfg.solver.threads,
    )
    orient = _orientation(cfg.task)
    native = to_native(orient, np.array([f.threshold for f in fits]))
    baseline = None
    if args.baseline == "crc":
        baseline = float(to_native(orient, marginal_crc_threshold(losses, cfg.alpha)))
    write_thresholds(out / "thresholds.csv", test_ids, native, baseline)
    write_certificate(out / "certificate.csv", test_ids, fits)
    update_manifest(out, "calibrate", cfg.seed, {"thresholds.csv": "thresholds-csv", "certificate.csv": "certificate-csv"})
    # an infinite fit has no finite minimizer to certify; its set is the trivial one
    bad = [i for i, f in zip(test_ids, fits) if f.status != "infinite" and not f.converged]
    n_inf = sum(f.status == "infinite" for f in fits)
    print(f"calibrated {len(fits)} records: {len(fits) - n_inf - len(bad)} certified, {n_inf} infinite, {len(bad)} uncertified")
    if bad:
        raise CertificateFailure(f"{len(bad)} records exceed the stationarity tolerance, e.g. ids {[int(i) for i in bad[:5]]}")
    return EXIT_OK


# evaluate -----------------------------------------------------------------------


def _thresholds_for(ids, path):
    t_ids, t, base = read_thresholds(path)
    pos = {int(i): k for k, i in enumerate(t_ids)}
    missing = [int(i) for i in ids if int(i) not in pos]
    if missing:
        raise DataFormatError(f"{path}: no thresholds for ids {missing[:5]}")
    order = [pos[int(i)] for i in ids]
    return t[order], (base[order] if base is not None else None)


def _evaluate_regression(test, t, base):
    r = np.abs(test.y - test.f_hat)
    width = np.maximum(t, 0.0)
    miss = (r > width).astype(np.float64)
    rec = RepetitionRecord(rep=0, seed=0)
    rec.marginal_risk = float(miss.mean())
    finite = np.isfinite(width)
    rec.mean_width = float(width[finite].mean()) if finite.any() else math.inf
    rec.infinite_fraction = float(np.mean(~finite))
    cols = {"id": test.ids, "threshold": t, "miscovered": miss}
    if base is not None:
        base_miss = (r > np.maximum(base, 0.0)).astype(np.float64)
        rec.baseline_marginal_risk = float(base_miss.mean())
        rec.baseline_width = float(max(base[0], 0.0))
        cols.update(crc_threshold=base, crc_miscovered=base_miss)
    return rec, cols, None


def _evaluate_segmentation(split, t, base, seed):
    ours = [mask_metrics(s.scores >= ti, s.mask) for s, ti in zip(split.samples, t)]
    at_half = np.array([mask_metrics(s.scores >= 0.5, s.mask).recall for s in split.samples])
    recall = np.array([m.recall for m in ours])
    precision = np.array([m.precision for m in ours])
    rec = RepetitionRecord(rep=0, seed=seed)
    rec.marginal_risk = float(np.mean(1.0 - recall))
    rec.recall_mean = float(recall.mean())
    rec.precision_mean = float(precision.mean())
    rec.infinite_fraction = float(np.mean(~np.isfinite(t)))
    try:
        sp = spearman(t, at_half, seed=seed)
        rec.spearman_rho, rec.spearman_p = sp.rho, sp.p_value
    except ValueError:
        pass  # fewer than 3 images or constant thresholds
    cols = {"id": split.ids, "threshold": t, "recall": recall, "precision": precision, "recall_at_half": at_half}
    if base is not None:
        theirs = [mask_metrics(s.scores >= b, s.mask) for s, b in zip(split.samples, base)]
        b_recall = np.array([m.recall for m in theirs])
        b_precision = np.array([m.precision for m in theirs])
        rec.baseline_marginal_risk = float(np.mean(1.0 - b_recall))
        rec.baseline_recall_mean = float(b_recall.mean())
        rec.baseline_precision_mean = float(b_precision.mean())
        cols.update(crc_threshold=base, crc_recall=b_recall, crc_precision=b_precision)
    return rec, cols, recall_bins(at_half, t)


def _write_columns(path, cols: dict) -> None:
    names = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(cols[n] for n in names)):
            w.writerow([int(v) if n == "id" else repr(float(v)) for n, v in zip(names, row)])


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    if cfg.task == "regression":
        data = read_regression_csv(args.test)
    else:
        data = read_segmentation(args.test)
    ids = data.ids
    if ids.size == 0:
        raise DataFormatError(f"{args.test}: empty test set")
    check_unique_ids(ids, args.test)
    t, base = _thresholds_for(ids, args.thresholds)
    if cfg.task == "regression":
        rec, cols, bins = _evaluate_regression(data, t, base)
    else:
        try:
            rec, cols, bins = _evaluate_segmentation(data, t, base, cfg.seed)
        except ValueError as exc:
            raise DataFormatError(str(exc)) from exc
    rec.seed = cfg.seed
    report = EvalReport(config=cfg.to_dict(), records=[rec], recall_bins=bins)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    _write_columns(out / "pairs.csv", cols)
    update_manifest(out, "evaluate", cfg.seed, {"report.json": "aacrc-report", "report.csv": "report-csv", "pairs.csv": "pairs-csv"})
    _print_summary(report)
    return EXIT_OK


# experiment / config ------------------------------------------------------------


def _print_summary(report: EvalReport) -> None:
    agg = report.aggregate()
    for name, stats in agg.items():
        if isinstance(stats, dict) and name != "tilted_risks":
            print(f"{name:26s} mean={stats['mean']:.6g} sd={stats['sd']:.3g} n={stats['count']}")


def cmd_experiment(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    report = run_experiment(cfg)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(report.to_csv())
    update_manifest(out, "experiment", cfg.seed, {"report.json": "aacrc-report", "report.csv": "report-csv"})
    _print_summary(report)
    violations = sum(r.certificate_violations or 0 for r in report.ok_records)
    if violations:
        raise CertificateFailure(f"{violations} directional certificate violations")
    return EXIT_OK


def cmd_config(args, cfg: RunConfig) -> int:
    if args.action == "dump-defaults":
        print(RunConfig(task=args.task or "regression").resolved().to_json())
    else:
        print(cfg.to_json())
    return EXIT_OK


# parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--task", choices=("regression", "segmentation"))
    p.add_argument("--seed", type=int, help="master seed (recorded in every output)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--threads", type=int, help="cap on calibration worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aacrc", description="Adaptive conformal risk control.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write synthetic data splits")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-residual", type=int)
    p.add_argument("--n-calibration", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--count", type=int, help="segmentation images generated")
    p.add_argument("--d1", type=int)
    p.add_argument("--d2", type=int)
    p.add_argument("--format", choices=("bin", "csv"), default="bin", help="segmentation container")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rf-embed", help="train a forest on residuals and write leaf embeddings")
    _common(p)
    p.add_argument("--residual", help="CSV with columns [id,]x..,abs_residual")
    p.add_argument("--model", help="reuse a saved forest instead of training")
    p.add_argument("--inputs", nargs="+", default=[], help="records to embed")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-samples-leaf", type=int)
    p.set_defaults(func=cmd_rf_embed)

    p = sub.add_parser("calibrate", help="fit per-record thresholds")
    _common(p)
    p.add_argument("--function-class", choices=("intercept", "groups", "embedding", "rf-leaf"))
    p.add_argument("--calibration", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cal-features", help="embedding file aligned by id with --calibration")
    p.add_argument("--test-features", help="embedding file aligned by id with --test")
    p.add_argument("--model", help="forest JSON; embeds raw inputs on the fly")
    p.add_argument("--pca-target", type=float)
    p.add_argument("--gamma", type=float, help="ridge strength (0 disables)")
    p.add_argument("--method", choices=("auto", "scan", "lp", "subgradient"))
    p.add_argument("--baseline", choices=("crc",), help="add the marginal CRC threshold column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score thresholds against ground truth")
    _common(p)
    p.add_argument("--test", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a repeated-split experiment")
    _common(p)
    p.add_argument("--function-class", choices=("intercept", "groups", "embedding", "rf-leaf"))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--n-calibration", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("config", help="show configuration")
    p.add_argument("action", choices=("dump-defaults", "validate"))
    p.add_argument("--config")
    p.add_argument("--task", choices=("regression", "segmentation"))
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, DegenerateDataError, InfeasibleLevelError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CertificateFailure as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except ValueError as exc:
        # remaining validation errors come from malformed inputs
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
