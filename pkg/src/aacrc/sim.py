"""Synthetic data generators and split plans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._seeding import child_seed, make_rng
from .tasks import SegmentationSample

EMBEDDING_DIM = 8


@dataclass(frozen=True)
class SplitPlan:
    """Split sizes, repetition count and master seed.

    ``train`` is the budget for fitting the base predictor. The regression
    generator ships its exact conditional mean as the predictor, so this
    split is not drawn there; it is kept so plans read like the protocol.
    ``train`` and ``residual`` may be 0 when a pathway does not use them.
    """

    train: int = 2000
    residual: int = 1000
    calibration: int = 9000
    test: int = 5000
    repetitions: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("calibration", "test", "repetitions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("train", "residual"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def repetition_seed(self, rep: int) -> int:
        return child_seed(self.seed, rep + 1)

    @property
    def feature_map_seed(self) -> int:
        return child_seed(self.seed, 0)


@dataclass(frozen=True, eq=False)
class RegressionData:
    x: np.ndarray
    y: np.ndarray
    f_hat: np.ndarray

    def __len__(self):
        return self.x.size

    def subset(self, idx) -> "RegressionData":
        return RegressionData(self.x[idx], self.y[idx], self.f_hat[idx])


def regression_mean(x):
    return np.sin(x) ** 2 + 0.1


def synth_regression_generate(n: int, seed: int) -> RegressionData:
    """Heteroscedastic 1-D data whose noise scale grows with ``x``.

    ``x ~ U[0, 10]``, ``y = sin(x)^2 + 0.1 + 0.3 (1 + x/10) eps`` with standard
    normal ``eps``; ``f_hat`` is the exact conditional mean.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(seed)
    x = rng.uniform(0.0, 10.0, size=n)
    eps = rng.standard_normal(n)
    f_hat = regression_mean(x)
    y = f_hat + 0.3 * (1.0 + x / 10.0) * eps
    return RegressionData(x=x, y=y, f_hat=f_hat)


@dataclass(frozen=True)
class SegmentationParams:
    """Knobs of the synthetic segmentation generator.

    The per-pixel logit is ``(D - offset + shift * (1 - 2 * sigma)) / (width0 +
    width1 * sigma)`` where ``D`` is the signed distance to the mask boundary
    (positive inside) and ``sigma ~ U[0, 1]`` the image difficulty. Larger
    ``sigma`` pushes scores of true pixels down and blurs the boundary.
    Scores are rounded to ``levels`` steps (8-bit by default, as score maps
    are usually stored); ``levels=0`` keeps full precision.
    """

    offset: float = 0.5
    shift: float = 1.5
    width0: float = 0.7
    width1: float = 1.5
    blur: float = 1.0
    noise_low: float = 0.02
    noise_high: float = 0.1
    max_discs: int = 3
    levels: int = 255
    embedding_dim: int = EMBEDDING_DIM


@dataclass(frozen=True, eq=False)
class SegmentationData:
    samples: list
    difficulty: np.ndarray
    embedding: np.ndarray

    def __len__(self):
        return len(self.samples)


def _blob_mask(rng, d1, d2, max_discs):
    rows, cols = np.mgrid[0:d1, 0:d2]
    small = min(d1, d2)
    mask = np.zeros((d1, d2), dtype=bool)
    for _ in range(int(rng.integers(1, max_discs + 1))):
        r = rng.uniform(0.12, 0.3) * small
        cy = rng.uniform(0.2, 0.8) * d1
        cx = rng.uniform(0.2, 0.8) * d2
        mask |= (rows - cy) ** 2 + (cols - cx) ** 2 <= r**2
    if not mask.any():
        mask[int(cy) % d1, int(cx) % d2] = True
    return mask


def synth_segmentation_generate(count: int, d1: int, d2: int, seed: int, params: SegmentationParams | None = None) -> SegmentationData:
    """Score maps and masks with a per-image difficulty and an embedding.

    Each mask is a union of one to three discs. Scores are a sigmoid of the
    signed distance to the boundary whose sharpness and level depend on the
    difficulty ``sigma``; they are then blurred, corrupted with per-image
    noise of level ``eta`` and clipped to [0, 1]. Embedding rows are
    ``[1, sigma, sigma^2, area fraction, eta]`` followed by standard-normal
    nuisance coordinates.
    """
    params = params or SegmentationParams()
    if count < 1:
        raise ValueError("count must be >= 1")
    if d1 < 1 or d2 < 1 or d1 * d2 < 16:
        raise ValueError("images need at least 16 pixels")
    if params.embedding_dim < 5:
        raise ValueError("embedding_dim must be >= 5")
    rng = make_rng(seed)
    samples = []
    difficulty = np.empty(count)
    emb = np.empty((count, params.embedding_dim))
    for i in range(count):
        mask = _blob_mask(rng, d1, d2, params.max_discs)
        sigma = rng.uniform()
        eta = rng.uniform(params.noise_low, params.noise_high)
        dist = ndimage.distance_transform_edt(mask) - ndimage.distance_transform_edt(~mask)
        logit = (dist - params.offset + params.shift * (1.0 - 2.0 * sigma)) / (
            params.width0 + params.width1 * sigma
        )
        scores = 1.0 / (1.0 + np.exp(-logit))
        if params.blur > 0:
            scores = ndimage.gaussian_filter(scores, params.blur, mode="nearest")
        scores = np.clip(scores + eta * rng.standard_normal(scores.shape), 0.0, 1.0)
        if params.levels > 0:
            scores = np.round(scores * params.levels) / params.levels
        samples.append(SegmentationSample(scores, mask))
        difficulty[i] = sigma
        emb[i, :5] = (1.0, sigma, sigma**2, mask.mean(), eta)
        emb[i, 5:] = rng.standard_normal(params.embedding_dim - 5)
    return SegmentationData(samples=samples, difficulty=difficulty, embedding=emb)
