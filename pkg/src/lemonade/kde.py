"""Gaussian kernel density over cheap objectives and the inverse-density sampling rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BANDWIDTH_FLOOR = 1e-3
DENSITY_FLOOR = 1e-12


@dataclass
class KdeEstimator:
    """Product-Gaussian KDE on z-scored points.

    ``points`` are already normalized with ``(mean, std)``; ``density`` takes raw
    (unnormalized) vectors and returns a density in raw units.
    """

    points: np.ndarray
    bandwidth: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    density_floor: float = DENSITY_FLOOR

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        d = self.points.shape[1]
        self.bandwidth = np.broadcast_to(np.asarray(self.bandwidth, dtype=np.float64), (d,)).copy()
        self.mean = np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (d,)).copy()
        self.std = np.broadcast_to(np.asarray(self.std, dtype=np.float64), (d,)).copy()
        if np.any(self.bandwidth <= 0) or np.any(self.std <= 0):
            raise ValueError("bandwidths and scales must be positive")

    def density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = (x - self.mean) / self.std
        u = (z[:, None, :] - self.points[None, :, :]) / self.bandwidth
        k = np.exp(-0.5 * (u ** 2).sum(axis=2)) / np.prod(self.bandwidth * np.sqrt(2 * np.pi))
        dens = k.mean(axis=1) / np.prod(self.std)
        return np.maximum(dens, self.density_floor)


def silverman_bandwidth(z):
    """Per-dimension Silverman rule ``sigma * (4 / ((d + 2) n)) ** (1 / (d + 4))``."""
    n, d = z.shape
    sigma = z.std(axis=0)
    return np.maximum(sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4)), BANDWIDTH_FLOOR)


def fit_kde(points) -> KdeEstimator:
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(pts) == 0:
        raise ValueError("KDE needs at least one point")
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (pts - mean) / std
    return KdeEstimator(z, silverman_bandwidth(z), mean, std)


def inverse_density_probs(densities):
    """``p_i = c / density_i`` with ``c`` normalizing the probabilities to one."""
    d = np.asarray(densities, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0 or np.any(d <= 0):
        raise ValueError("densities must be a non-empty vector of positive values")
    inv = 1.0 / d
    return inv / inv.sum()


def parent_probs(densities, uniform=False):
    """Parent selection distribution over the population."""
    if uniform:
        n = len(densities)
        return np.full(n, 1.0 / n)
    return inverse_density_probs(densities)


def accept_probs(densities, uniform=False):
    """Acceptance distribution over proposed children (densities under the parents' KDE)."""
    return parent_probs(densities, uniform)


def sample_without_replacement(probs, k, rng):
    """Draw ``min(k, len(probs))`` distinct indices, renormalizing after each draw."""
    p = np.asarray(probs, dtype=np.float64).copy()
    k = min(k, len(p))
    if k == len(p):
        return list(range(len(p)))
    chosen = []
    for _ in range(k):
        total = p.sum()
        i = int(rng.choice(len(p), p=p / total))
        chosen.append(i)
        p[i] = 0.0
    return sorted(chosen)
