"""Evaluation statistics and the per-repetition report."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ._seeding import make_rng

# below this size the t-approximation is replaced by a permutation p-value
EXACT_SPEARMAN_MAX = 8
PERMUTATION_SPEARMAN_MAX = 29
N_PERMUTATIONS = 20_000


def tilted_risk(weights, losses) -> float:
    """Weighted mean ``sum(w * l) / sum(w)`` for nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    l = np.asarray(losses, dtype=np.float64).reshape(-1)
    if w.size != l.size:
        raise ValueError("weights and losses disagree in length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights sum to zero")
    return float(w @ l / total)


@dataclass(frozen=True)
class GroupRisks:
    """Mean loss and member count per nonempty group; empty groups listed apart."""

    risks: dict
    empty: list

    def __getitem__(self, j):
        return self.risks[j]

    def __len__(self):
        return len(self.risks)


def group_risks(groups, losses) -> GroupRisks:
    G = np.asarray(groups, dtype=bool)
    l = np.asarray(losses, dtype=np.float64).reshape(-1)
    if G.ndim == 1:
        G = G.reshape(-1, 1)
    if G.shape[0] != l.size:
        raise ValueError("group matrix rows and losses disagree")
    counts = G.sum(axis=0)
    sums = l @ G
    risks = {int(j): (float(sums[j] / counts[j]), int(counts[j])) for j in np.flatnonzero(counts)}
    return GroupRisks(risks, [int(j) for j in np.flatnonzero(counts == 0)])


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    method: str


def spearman(a, b, seed: int = 0) -> SpearmanResult:
    """Rank correlation with average ranks for ties and a two-sided p-value.

    The p-value uses the t-approximation for 30 or more pairs, exact
    enumeration of all permutations up to 8 pairs and a seeded Monte-Carlo
    permutation test in between.
    """
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError("inputs disagree in length")
    m = x.size
    if m < 3:
        raise ValueError("need at least 3 pairs")
    if np.any(np.isnan(x)) or np.any(np.isnan(y)):
        raise ValueError("inputs contain NaN")
    rx = stats.rankdata(x)
    ry = stats.rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        raise ValueError("correlation undefined for a constant input")
    rho = _pearson(rx, ry)
    if m > PERMUTATION_SPEARMAN_MAX:
        if abs(rho) >= 1.0:
            return SpearmanResult(rho, 0.0, "t")
        t = rho * math.sqrt((m - 2) / (1.0 - rho * rho))
        return SpearmanResult(rho, float(2.0 * stats.t.sf(abs(t), m - 2)), "t")
    cut = abs(rho) - 1e-12
    if m <= EXACT_SPEARMAN_MAX:
        perms = np.array(list(itertools.permutations(range(m))))
        null = _pearson_rows(ry[perms], rx)
        return SpearmanResult(rho, float(np.mean(np.abs(null) >= cut)), "exact")
    rng = make_rng(seed)
    hits = 0
    for start in range(0, N_PERMUTATIONS, 5000):
        k = min(5000, N_PERMUTATIONS - start)
        shuffled = rng.permuted(np.broadcast_to(ry, (k, m)), axis=1)
        hits += int(np.sum(np.abs(_pearson_rows(shuffled, rx)) >= cut))
    return SpearmanResult(rho, (hits + 1) / (N_PERMUTATIONS + 1), "permutation")


def _pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.clip(xc @ yc / math.sqrt((xc @ xc) * (yc @ yc)), -1.0, 1.0))


def _pearson_rows(Y, x):
    xc = x - x.mean()
    Yc = Y - Y.mean(axis=1, keepdims=True)
    return (Yc @ xc) / np.sqrt((Yc * Yc).sum(axis=1) * (xc @ xc))


def recall_bins(recalls, thresholds, width: float = 0.1) -> list[dict]:
    """Threshold summary per bin of fixed-threshold recall (``[0, .1), ..., [.9, 1]``)."""
    r = np.asarray(recalls, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    n_bins = int(round(1.0 / width))
    idx = np.minimum((r / width + 1e-9).astype(int), n_bins - 1)
    rows = []
    for k in range(n_bins):
        sel = t[idx == k]
        sel = sel[np.isfinite(sel)]
        rows.append(
            {
                "recall_low": round(k * width, 10),
                "recall_high": round((k + 1) * width, 10),
                "count": int(np.sum(idx == k)),
                "threshold_mean": float(sel.mean()) if sel.size else None,
                "threshold_sd": float(sel.std(ddof=1)) if sel.size > 1 else None,
            }
        )
    return rows


SCALAR_FIELDS = (
    "marginal_risk",
    "baseline_marginal_risk",
    "recall_mean",
    "baseline_recall_mean",
    "precision_mean",
    "baseline_precision_mean",
    "mean_width",
    "baseline_width",
    "spearman_rho",
    "spearman_p",
    "n_fits",
    "n_converged",
    "n_infinite",
    "n_failed",
    "infinite_fraction",
    "max_residual_ratio",
    "certificate_violations",
)


@dataclass
class RepetitionRecord:
    """Statistics of one repetition; ``None`` marks a statistic that does not apply."""

    rep: int
    seed: int
    status: str = "ok"
    error: str | None = None
    marginal_risk: float | None = None
    baseline_marginal_risk: float | None = None
    recall_mean: float | None = None
    baseline_recall_mean: float | None = None
    precision_mean: float | None = None
    baseline_precision_mean: float | None = None
    mean_width: float | None = None
    baseline_width: float | None = None
    spearman_rho: float | None = None
    spearman_p: float | None = None
    n_fits: int | None = None
    n_converged: int | None = None
    n_infinite: int | None = None
    n_failed: int | None = None
    infinite_fraction: float | None = None
    max_residual_ratio: float | None = None
    certificate_violations: int | None = None
    per_group_risk: dict = field(default_factory=dict)
    tilted_risks: list = field(default_factory=list)


@dataclass
class EvalReport:
    """Per-repetition records plus pooled tables; aggregates are derived on demand."""

    config: dict
    records: list
    pooled_group_risk: dict | None = None
    recall_bins: list | None = None
    version: int = 1

    @property
    def ok_records(self) -> list:
        return [r for r in self.records if r.status == "ok"]

    def aggregate(self) -> dict:
        out = {}
        ok = self.ok_records
        for name in SCALAR_FIELDS:
            vals = [getattr(r, name) for r in ok if getattr(r, name) is not None]
            vals = [v for v in vals if math.isfinite(v)]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                out[name] = {
                    "mean": float(arr.mean()),
                    "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
                    "count": int(arr.size),
                }
        tilted = [r.tilted_risks for r in ok if r.tilted_risks]
        if tilted and len({len(t) for t in tilted}) == 1:
            # NaN marks a direction with no weight on that repetition's test set
            arr = np.asarray(tilted, dtype=np.float64)
            counts = np.sum(~np.isnan(arr), axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = np.nansum(arr, axis=0) / counts
                dev = np.nansum((arr - mean) ** 2, axis=0) / np.maximum(counts - 1, 1)
            out["tilted_risks"] = {
                "mean": mean.tolist(),
                "sd": np.sqrt(dev).tolist(),
                "count": counts.tolist(),
            }
        out["repetitions_ok"] = len(ok)
        out["repetitions_failed"] = len(self.records) - len(ok)
        return out

    def to_dict(self) -> dict:
        return {
            "format": "aacrc-report",
            "version": self.version,
            "config": self.config,
            "aggregate": self.aggregate(),
            "pooled_group_risk": self.pooled_group_risk,
            "recall_bins": self.recall_bins,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        if doc.get("format") != "aacrc-report" or doc.get("version") != 1:
            raise ValueError("not a version-1 report document")
        records = []
        for raw in doc["records"]:
            raw = {k: _unjson(v) for k, v in raw.items()}
            raw["per_group_risk"] = {k: tuple(v) for k, v in raw["per_group_risk"].items()}
            records.append(RepetitionRecord(**raw))
        return cls(doc["config"], records, doc.get("pooled_group_risk"), doc.get("recall_bins"))

    def to_csv(self) -> str:
        """One row per repetition with the scalar statistics and tilted risks."""
        n_tilted = max((len(r.tilted_risks) for r in self.records), default=0)
        header = ["rep", "seed", "status"] + list(SCALAR_FIELDS) + [f"tilted_{k}" for k in range(n_tilted)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.records:
            row = [r.rep, r.seed, r.status] + [_fmt(getattr(r, f)) for f in SCALAR_FIELDS]
            row += [_fmt(v) for v in r.tilted_risks] + [""] * (n_tilted - len(r.tilted_risks))
            w.writerow(row)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _jsonable(obj):
    """Replace non-finite floats by strings so the document stays strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else ("inf" if f > 0 else "-inf" if f < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(v):
    if v in ("inf", "-inf", "nan"):
        return float(v)
    return v
