"""Feature maps defining the threshold function class ``x -> phi(x) @ theta``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .forest import RandomForest, rf_leaf_embed


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_variance_ratio: np.ndarray  # all axes, descending
    n_components: int


def pca_fit(embeddings, target_evr: float = 0.85) -> PCAModel:
    """Principal axes of ``embeddings`` keeping the fewest components whose
    cumulative explained-variance ratio reaches ``target_evr``."""
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need a 2-D array with at least two rows")
    if not 0.0 < target_evr <= 1.0:
        raise ValueError("target_evr must lie in (0, 1]")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2
    if var.sum() <= 0.0 or not np.isfinite(var.sum()):
        raise DegenerateDataError("embeddings have zero variance")
    evr = var / var.sum()
    # deterministic signs: largest-magnitude loading positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    m = int(np.searchsorted(np.cumsum(evr), target_evr - 1e-12) + 1)
    m = min(m, int(np.sum(var > var[0] * 1e-24)))
    comps = vt[:m].copy()
    return PCAModel(mean=mean, components=comps, explained_variance_ratio=evr, n_components=m)


def pca_project(model: PCAModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.mean.size:
        raise ValueError(f"expected dimension {model.mean.size}, got {v.shape[-1]}")
    return (v - model.mean) @ model.components.T


class FeatureMap:
    """Base class; subclasses set ``dim`` and implement ``featurize_many``."""

    dim: int

    def featurize(self, x) -> np.ndarray:
        return self.featurize_many(np.asarray(x, dtype=np.float64)[None, ...])[0]

    def featurize_many(self, X) -> np.ndarray:
        raise NotImplementedError


class Intercept(FeatureMap):
    """Constant class; recovers marginal risk control."""

    dim = 1

    def featurize_many(self, X) -> np.ndarray:
        return np.ones((len(X), 1))

    def __repr__(self):
        return "Intercept()"


class GroupIndicators(FeatureMap):
    """Possibly overlapping group memberships.

    With ``membership=None`` the records are taken to be indicator rows
    already (e.g. rows of a membership matrix) and are validated as binary.
    Otherwise ``membership(x)`` must return ``dim`` booleans.
    """

    def __init__(self, dim: int, membership: Callable | None = None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.membership = membership

    @classmethod
    def intervals(cls, edges, feature: int = 0, include_all: bool = False) -> "IntervalGroups":
        """Groups ``[lo, hi)`` over one raw feature, one per ``(lo, hi)`` pair."""
        return IntervalGroups(edges, feature, include_all)

    def featurize_many(self, X) -> np.ndarray:
        if self.membership is None:
            G = np.asarray(X, dtype=np.float64)
            if G.ndim != 2 or G.shape[1] != self.dim:
                raise ValueError(f"expected indicator rows of length {self.dim}")
            if not np.all((G == 0) | (G == 1)):
                raise ValueError("group indicators must be 0/1")
            return G.copy()
        out = np.array([np.asarray(self.membership(x), dtype=bool) for x in X], dtype=np.float64)
        if out.shape != (len(X), self.dim):
            raise ValueError(f"membership must return {self.dim} flags")
        return out

    def __repr__(self):
        return f"GroupIndicators(dim={self.dim})"


class IntervalGroups(GroupIndicators):
    """Bins ``[lo, hi)`` of one raw feature, optionally plus an all-points group
    (appended last)."""

    def __init__(self, edges, feature: int = 0, include_all: bool = False):
        self.edges = np.array([(float(lo), float(hi)) for lo, hi in edges]).reshape(-1, 2)
        self.feature = int(feature)
        self.include_all = bool(include_all)
        super().__init__(len(self.edges) + int(self.include_all), None)

    def featurize_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[1] <= self.feature:
            raise ValueError(f"records need at least {self.feature + 1} features")
        v = X[:, self.feature : self.feature + 1]
        out = ((v >= self.edges[:, 0]) & (v < self.edges[:, 1])).astype(np.float64)
        if self.include_all:
            out = np.hstack([out, np.ones((out.shape[0], 1))])
        return out

    def __repr__(self):
        return f"IntervalGroups(edges={self.edges.tolist()}, include_all={self.include_all})"


class LinearEmbedding(FeatureMap):
    """Precomputed embedding vectors, optionally PCA-reduced, optionally with
    an appended intercept coordinate."""

    def __init__(self, input_dim: int, pca: PCAModel | None = None, append_intercept: bool = False):
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if pca is not None and pca.mean.size != input_dim:
            raise ValueError("PCA model dimension does not match input_dim")
        self.input_dim = int(input_dim)
        self.pca = pca
        self.append_intercept = bool(append_intercept)
        base = pca.n_components if pca is not None else input_dim
        self.dim = base + int(self.append_intercept)

    def featurize_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected embeddings of dimension {self.input_dim}")
        out = pca_project(self.pca, X) if self.pca is not None else X.copy()
        if self.append_intercept:
            out = np.hstack([out, np.ones((out.shape[0], 1))])
        return out

    def __repr__(self):
        return (
            f"LinearEmbedding(input_dim={self.input_dim}, pca={self.pca is not None}, "
            f"append_intercept={self.append_intercept})"
        )


class RFLeaf(FeatureMap):
    """Leaf indicators of a fitted forest; one group per leaf."""

    def __init__(self, forest: RandomForest):
        self.forest = forest
        self.dim = forest.leaf_count

    def featurize_many(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return rf_leaf_embed(self.forest, X)

    def __repr__(self):
        return f"RFLeaf(n_trees={len(self.forest.trees)}, dim={self.dim})"


def featurize(feature_map: FeatureMap, x) -> np.ndarray:
    """``phi(x)`` for a single record."""
    return feature_map.featurize(x)
