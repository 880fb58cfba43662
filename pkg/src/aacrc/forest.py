"""Random-forest leaf groups.

A forest of CART regression trees is grown on absolute residuals of a base
model. Each leaf of each tree defines a group; an input belongs to exactly one
leaf per tree, so its leaf-indicator embedding has one 1 per tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._seeding import make_rng, splitmix64

FOREST_FORMAT = "aacrc-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    """Forest hyperparameters.

    ``max_features`` is the fraction of features considered at each split;
    ``None`` means all features for one-dimensional inputs and a third
    otherwise.
    """

    n_trees: int = 20
    max_depth: int = 4
    min_samples_leaf: int = 50
    max_features: float | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features is not None and not 0.0 < self.max_features <= 1.0:
            raise ValueError("max_features must be a fraction in (0, 1]")

    def features_per_split(self, n_features: int) -> int:
        frac = self.max_features
        if frac is None:
            frac = 1.0 if n_features == 1 else 1.0 / 3.0
        return max(1, min(n_features, math.ceil(frac * n_features)))


@dataclass(frozen=True, eq=False)
class Tree:
    """Array-backed binary tree; node 0 is the root.

    Internal nodes send ``x[feature] <= threshold`` to ``left``. Leaves have
    ``feature == -1`` and carry a forest-wide ``leaf_id``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_id: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        def _depth(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(_depth(self.left[node]), _depth(self.right[node]))

        return _depth(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Global leaf id reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            r = rows[internal]
            n = node[internal]
            go_left = X[r, feat[internal]] <= self.threshold[n]
            node[internal] = np.where(go_left, self.left[n], self.right[n])
        return self.leaf_id[node]

    def to_dict(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"leaf": int(self.leaf_id[node]), "value": float(self.value[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "value": float(self.value[node]),
            "left": self.to_dict(int(self.left[node])),
            "right": self.to_dict(int(self.right[node])),
        }

    @classmethod
    def from_dict(cls, root: dict) -> "Tree":
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "leaf_id")}

        def _add(node):
            i = len(cols["feature"])
            for k in cols:
                cols[k].append(-1)
            cols["value"][i] = float(node["value"])
            cols["threshold"][i] = 0.0
            if "leaf" in node:
                cols["leaf_id"][i] = int(node["leaf"])
                return i
            cols["feature"][i] = int(node["feature"])
            cols["threshold"][i] = float(node["threshold"])
            cols["left"][i] = _add(node["left"])
            cols["right"][i] = _add(node["right"])
            return i

        _add(root)
        return cls(
            feature=np.array(cols["feature"], dtype=np.int64),
            threshold=np.array(cols["threshold"], dtype=np.float64),
            left=np.array(cols["left"], dtype=np.int64),
            right=np.array(cols["right"], dtype=np.int64),
            value=np.array(cols["value"], dtype=np.float64),
            leaf_id=np.array(cols["leaf_id"], dtype=np.int64),
        )


@dataclass(frozen=True, eq=False)
class RandomForest:
    trees: tuple[Tree, ...]
    params: ForestParams
    n_features: int

    @property
    def leaf_count(self) -> int:
        return sum(t.n_leaves for t in self.trees)

    def apply(self, X) -> np.ndarray:
        """Leaf ids, shape ``(m, n_trees)``."""
        X = self._check(X)
        return np.stack([t.apply(X) for t in self.trees], axis=1)

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        return np.mean([t.value[_leaf_nodes(t)[t.apply(X)]] for t in self.trees], axis=0)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if self.n_features == 1 else X.reshape(1, -1)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def to_json(self) -> str:
        doc = {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "n_features": self.n_features,
            "leaf_count": self.leaf_count,
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RandomForest":
        doc = json.loads(text)
        if doc.get("format") != FOREST_FORMAT:
            raise ValueError("not a forest document")
        if doc.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest version {doc.get('version')!r}")
        forest = cls(
            trees=tuple(Tree.from_dict(t) for t in doc["trees"]),
            params=ForestParams(**doc["params"]),
            n_features=int(doc["n_features"]),
        )
        ids = np.sort(np.concatenate([t.leaf_id[t.feature < 0] for t in forest.trees]))
        if not np.array_equal(ids, np.arange(ids.size)) or ids.size != doc["leaf_count"]:
            raise ValueError("leaf ids are not a contiguous enumeration")
        return forest


def _leaf_nodes(tree: Tree) -> np.ndarray:
    """Map from global leaf id to node index (sized to the largest id)."""
    leaves = np.flatnonzero(tree.feature < 0)
    out = np.full(tree.leaf_id.max() + 1, -1, dtype=np.int64)
    out[tree.leaf_id[leaves]] = leaves
    return out


def _best_split(X, y, idx, n_try, min_leaf, rng):
    """Variance-reduction split of the samples ``idx``; None if nothing helps."""
    m = idx.size
    yy = y[idx]
    if m < 2 * min_leaf or np.ptp(yy) == 0.0:
        return None
    total = yy.sum()
    sse = float(np.sum((yy - total / m) ** 2))
    p = X.shape[1]
    feats = np.arange(p) if n_try >= p else np.sort(rng.choice(p, size=n_try, replace=False))
    k = np.arange(1, m)
    size_ok = (k >= min_leaf) & (m - k >= min_leaf)
    best = None
    best_score = -np.inf
    for f in feats:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        ok = size_ok & (xs[1:] > xs[:-1])
        if not ok.any():
            continue
        left = np.cumsum(yy[order])[:-1]
        score = np.where(ok, left**2 / k + (total - left) ** 2 / (m - k), -np.inf)
        j = int(np.argmax(score))
        if score[j] > best_score:
            thr = 0.5 * (xs[j] + xs[j + 1])
            if thr >= xs[j + 1]:
                thr = xs[j]
            best_score = score[j]
            best = (int(f), float(thr))
    if best is None or best_score - total**2 / m <= 1e-9 * sse:
        return None
    return best


def _grow_tree(X, y, idx, params, n_try, rng, leaf_offset):
    cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "leaf_id")}
    n_leaves = 0

    def _node(sample, depth):
        nonlocal n_leaves
        i = len(cols["feature"])
        for key in cols:
            cols[key].append(-1)
        cols["threshold"][i] = 0.0
        cols["value"][i] = float(np.mean(y[sample]))
        split = None
        if depth < params.max_depth:
            split = _best_split(X, y, sample, n_try, params.min_samples_leaf, rng)
        if split is None:
            cols["leaf_id"][i] = leaf_offset + n_leaves
            n_leaves += 1
            return i
        f, thr = split
        go_left = X[sample, f] <= thr
        cols["feature"][i] = f
        cols["threshold"][i] = thr
        cols["left"][i] = _node(sample[go_left], depth + 1)
        cols["right"][i] = _node(sample[~go_left], depth + 1)
        return i

    _node(idx, 0)
    return Tree(
        feature=np.array(cols["feature"], dtype=np.int64),
        threshold=np.array(cols["threshold"], dtype=np.float64),
        left=np.array(cols["left"], dtype=np.int64),
        right=np.array(cols["right"], dtype=np.int64),
        value=np.array(cols["value"], dtype=np.float64),
        leaf_id=np.array(cols["leaf_id"], dtype=np.int64),
    )


def rf_fit(features, residual_targets, params: ForestParams | None = None) -> RandomForest:
    """Grow a forest of CART regression trees on absolute residuals.

    Each tree sees a bootstrap resample (when enabled) drawn from its own
    generator; tree ``t`` is seeded with the ``t``-th splitmix64 output of
    ``params.seed``.
    """
    params = params or ForestParams()
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(residual_targets, dtype=np.float64).reshape(-1)
    n, p = X.shape
    if n == 0 or p == 0:
        raise ValueError("empty training data")
    if y.size != n:
        raise ValueError("features and targets disagree in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    if n < 2 * params.min_samples_leaf:
        raise ValueError(
            f"need at least 2*min_samples_leaf={2 * params.min_samples_leaf} points, got {n}"
        )
    n_try = params.features_per_split(p)
    trees = []
    offset = 0
    for tree_seed in splitmix64(params.seed, params.n_trees):
        rng = make_rng(tree_seed)
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        tree = _grow_tree(X, y, idx, params, n_try, rng, offset)
        offset += tree.n_leaves
        trees.append(tree)
    return RandomForest(trees=tuple(trees), params=params, n_features=p)


def rf_leaf_embed(forest: RandomForest, x) -> np.ndarray:
    """Leaf-indicator vector(s): one 1 per tree at the leaf ``x`` falls into.

    Accepts a single record or a matrix of records.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 0 or (X.ndim == 1 and not (forest.n_features == 1 and X.size > 1))
    if single:
        X = X.reshape(1, -1)
    leaves = forest.apply(X)
    out = np.zeros((leaves.shape[0], forest.leaf_count), dtype=np.float64)
    out[np.arange(leaves.shape[0])[:, None], leaves] = 1.0
    return out[0] if single else out
