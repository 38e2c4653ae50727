"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from lemonade import layers as L

FD_STEP = 1e-5
FD_RTOL = 1e-3


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grad_close(analytic, numeric, rtol=FD_RTOL, atol=1e-8):
    """Relative agreement, or absolute agreement for gradients that vanish analytically
    (a bias feeding a train-mode BatchNorm, for instance)."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    return rel_error(analytic, numeric) <= rtol or diff <= atol


def _copy(params):
    return {k: np.array(v, copy=True) for k, v in params.items()}


def layer_gradient_errors(kind, params, inputs, mode, rng, h=FD_STEP):
    """Relative errors of analytic vs central-difference gradients for one layer.

    The scalar probed is ``sum(out * r)`` for a fixed random ``r``; BatchNorm's moving
    statistics are restored before every evaluation so train mode stays a pure function.
    """
    out, _ = L.forward(kind, _copy(params), [x.copy() for x in inputs], mode)
    r = rng.normal(size=out.shape)

    def f(p, xs):
        o, _ = L.forward(kind, _copy(p), xs, mode)
        return float((o * r).sum())

    _, cache = L.forward(kind, _copy(params), [x.copy() for x in inputs], mode)
    dxs, dps = L.backward(kind, _copy(params), cache, r)
    errors = {}
    for i, x in enumerate(inputs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xs_p = [t.copy() for t in inputs]
            xs_m = [t.copy() for t in inputs]
            xs_p[i][idx] += h
            xs_m[i][idx] -= h
            num[idx] = (f(params, xs_p) - f(params, xs_m)) / (2 * h)
        errors[f"input{i}"] = rel_error(dxs[i], num)
    for name in L.LEARNABLE:
        if name not in params:
            continue
        p = params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            pp, pm = _copy(params), _copy(params)
            pp[name][idx] += h
            pm[name][idx] -= h
            num[idx] = (f(pp, inputs) - f(pm, inputs)) / (2 * h)
        errors[name] = rel_error(dps[name], num)
    return errors


def random_layer_case(kind_name, rng):
    """A randomized ``(kind, params, inputs, mode)`` case away from ReLU/max kinks."""
    n = int(rng.integers(2, 4))
    c = int(rng.integers(1, 4))
    hgt, wid = int(rng.integers(4, 7)), int(rng.integers(4, 7))
    x = rng.normal(size=(n, c, hgt, wid))
    mode = L.INFER
    if kind_name == "Conv2d":
        kind = L.Conv2d(int(rng.choice([1, 3, 5])), int(rng.integers(1, 3)),
                        int(rng.integers(1, 4)), bool(rng.integers(2)))
    elif kind_name == "SeparableConv2d":
        kind = L.SeparableConv2d(int(rng.choice([1, 3, 5])), int(rng.integers(1, 3)),
                                 int(rng.integers(1, 4)), bool(rng.integers(2)))
    elif kind_name == "Dense":
        x = rng.normal(size=(n, int(rng.integers(1, 6))))
        kind = L.Dense(int(rng.integers(1, 5)), bool(rng.integers(2)))
    elif kind_name == "BatchNorm":
        kind = L.BatchNorm()
        mode = L.TRAIN if rng.integers(2) else L.INFER
        if rng.integers(2):
            x = rng.normal(size=(n + 2, c))
    elif kind_name == "ReLU":
        x = np.sign(x) * (np.abs(x) + 0.01)
        kind = L.ReLU()
    elif kind_name == "MaxPool":
        # distinct values spaced well beyond the finite-difference step
        x = rng.permutation(x.size).reshape(x.shape) * 0.01
        kind = L.MaxPool(2, int(rng.integers(1, 3)))
    elif kind_name == "GlobalAvgPool":
        kind = L.GlobalAvgPool()
    elif kind_name == "SoftmaxHead":
        x = rng.normal(size=(n, int(rng.integers(2, 6))))
        kind = L.SoftmaxHead()
    elif kind_name == "Input":
        kind = L.Input()
    elif kind_name == "AddJoin":
        kind = L.AddJoin()
        x = [x, rng.normal(size=x.shape)]
    elif kind_name == "ConcatJoin":
        kind = L.ConcatJoin()
        x = [x, rng.normal(size=(n, int(rng.integers(1, 4)), hgt, wid))]
    else:
        raise ValueError(kind_name)
    inputs = x if isinstance(x, list) else [x]
    shapes = [t.shape[1:] for t in inputs]
    params = L.init_params(kind, shapes, rng) if L.is_weighted(kind) else {}
    # move every parameter off its special initial value
    for name, v in params.items():
        if name == "var":
            params[name] = rng.uniform(0.5, 2.0, size=v.shape)
        elif name == "lam":
            params[name] = np.asarray(rng.uniform(0.1, 0.9))
        else:
            params[name] = v + rng.normal(scale=0.3, size=v.shape)
    return kind, params, inputs, mode


def brute_pareto(vectors):
    """O(n^2) reference: indices of non-dominated vectors, first of any duplicates kept."""
    keep = []
    for i, a in enumerate(vectors):
        ok = True
        for j, b in enumerate(vectors):
            if j == i:
                continue
            if all(x <= y for x, y in zip(b, a)) and any(x < y for x, y in zip(b, a)):
                ok = False
                break
            if j < i and tuple(b) == tuple(a):
                ok = False
                break
        if ok:
            keep.append(i)
    return keep


def grid_hypervolume(front, ref, res=1e-3):
    """Count dominated cell centres of a uniform grid between the lower bound and ``ref``."""
    front = np.asarray(front, dtype=float)
    lo = front.min(axis=0)
    xs = np.arange(lo[0] + res / 2, ref[0], res)
    ys = np.arange(lo[1] + res / 2, ref[1], res)
    # for each x, the smallest y reached by points with x-coordinate <= x
    order = np.argsort(front[:, 0])
    fx, fy = front[order, 0], np.minimum.accumulate(front[order, 1])
    pos = np.searchsorted(fx, xs, side="right") - 1
    best_y = np.where(pos >= 0, fy[np.clip(pos, 0, None)], np.inf)
    counts = (ys[None, :] >= best_y[:, None]).sum(axis=1)
    return float(counts.sum()) * res * res
