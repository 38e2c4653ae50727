"""Pareto dominance, non-dominated filtering and the hypervolume indicator (minimization)."""

from __future__ import annotations

import numpy as np


def _vector(item):
    if hasattr(item, "objectives"):
        item = item.objectives
    if hasattr(item, "values") and not isinstance(item, (dict, np.ndarray)):
        item = item.values
    return np.asarray(item, dtype=np.float64)


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    if hasattr(a, "names") and hasattr(b, "names") and tuple(a.names) != tuple(b.names):
        raise ValueError("objective vectors have different names")
    a, b = _vector(a), _vector(b)
    if a.shape != b.shape:
        raise ValueError(f"objective vectors differ in length: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def nondominated_mask(values) -> np.ndarray:
    """Boolean mask of the rows that no other row dominates and that are not a later
    duplicate of an earlier row."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        le = np.all(v <= v[i], axis=1)
        lt = np.any(v < v[i], axis=1)
        if np.any(le & lt):
            keep[i] = False
            continue
        # exact duplicates: the earliest one survives
        same = np.all(v[:i] == v[i], axis=1)
        if np.any(same):
            keep[i] = False
    return keep


def pareto_front(candidates, key=None) -> list:
    """Non-dominated subset of ``candidates`` in input order.

    ``key`` maps a candidate to its objective vector; by default objects with an
    ``objectives`` attribute, objective vectors and plain sequences are understood.
    Among candidates with identical vectors only the first is kept, so callers pass
    candidates in birth order.
    """
    items = list(candidates)
    if not items:
        return []
    vals = np.array([_vector(key(c) if key else c) for c in items])
    mask = nondominated_mask(vals)
    return [c for c, k in zip(items, mask) if k]


def _hv2d(points, ref):
    pts = sorted(map(tuple, points))
    hv, prev_y = 0.0, ref[1]
    for x, y in pts:
        if y < prev_y:
            hv += (ref[0] - x) * (prev_y - y)
            prev_y = y
    return hv


def hypervolume(front, reference) -> float:
    """Measure of the region dominated by ``front`` and bounded by ``reference``.

    Exact sweep in 2-D; 3-D is sliced along the last objective into 2-D sweeps.
    """
    ref = _vector(reference)
    pts = np.array([_vector(p) for p in front], dtype=np.float64).reshape(-1, len(ref))
    if len(pts) == 0:
        return 0.0
    if np.any(pts > ref):
        raise ValueError("every front point must dominate the reference point")
    d = len(ref)
    if d == 2:
        return _hv2d(pts, ref)
    if d == 3:
        order = np.argsort(pts[:, 2], kind="stable")
        pts = pts[order]
        zs = list(pts[:, 2]) + [ref[2]]
        total = 0.0
        for i in range(len(pts)):
            depth = zs[i + 1] - zs[i]
            if depth > 0:
                total += _hv2d(pts[:i + 1, :2], ref[:2]) * depth
        return total
    raise ValueError(f"hypervolume supports 2 or 3 objectives, got {d}")
