"""Gaussian kernel machinery.

One bandwidth convention is used throughout the package:
``k(x, c) = exp(-||x - c||^2 / (2 sigma^2))``. Kernels written as
``exp(-||x - c||^2 / gamma)`` convert with :func:`sigma_from_gamma`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import DegenerateData, DimensionMismatch, TooFewPoints


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class GaussianBasis:
    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        centers = _as_2d(self.centers)
        if centers.shape[0] < 1:
            raise ValueError("basis needs at least one center")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if not np.all(np.isfinite(centers)):
            raise ValueError("centers must be finite")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __call__(self, x):
        return design_matrix(self, x)


def sigma_from_gamma(gamma: float) -> float:
    """Bandwidth ``sigma`` equivalent to the kernel ``exp(-d^2 / gamma)``."""
    return float(np.sqrt(gamma / 2.0))


def kernel_matrix(bandwidth: float, a, b) -> np.ndarray:
    a, b = _as_2d(a), _as_2d(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"inputs have {a.shape[1]} and {b.shape[1]} columns")
    sq = cdist(a, b, "sqeuclidean")
    return np.exp(-sq / (2.0 * bandwidth * bandwidth))


def design_matrix(basis: GaussianBasis, x) -> np.ndarray:
    """``n x b`` matrix of basis function values at the rows of ``x``."""
    x = _as_2d(x)
    if x.shape[1] != basis.dim:
        raise DimensionMismatch(f"x has {x.shape[1]} columns, centers have {basis.dim}")
    return kernel_matrix(basis.bandwidth, x, basis.centers)


def choose_centers(test_x, b: int, rng) -> np.ndarray:
    """Sample ``b`` distinct rows of ``test_x`` without replacement."""
    test_x = _as_2d(test_x)
    n = test_x.shape[0]
    if b > n:
        raise TooFewPoints(f"requested {b} centers from {n} points")
    idx = rng.permutation(n)[:b]
    return test_x[idx].copy()


def median_heuristic(x) -> float:
    """Median pairwise Euclidean distance (lower median for even counts)."""
    x = _as_2d(x)
    if x.shape[0] < 2:
        raise DegenerateData("median heuristic needs at least two points")
    d = np.sort(pdist(x))
    med = float(d[(d.size - 1) // 2])
    if med <= 0.0:
        raise DegenerateData("median pairwise distance is zero")
    return med
