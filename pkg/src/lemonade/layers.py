"""Layer vocabulary: shape rules, parameter layout, forward and backward kernels.

All tensors are numpy arrays in NCHW layout (or ``(N, F)`` after pooling).
Convolutions pad with ``kernel // 2`` zeros on each side, so stride 1 keeps the
spatial size and stride ``s`` gives ``(H + 2*(k//2) - k) // s + 1`` rows.
Max pooling does not pad.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import MissingWeightsError, ShapeError

TRAIN = "train"
INFER = "infer"

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


@dataclass(frozen=True)
class Input:
    pass


@dataclass(frozen=True)
class Conv2d:
    kernel: int = 3
    stride: int = 1
    out_channels: int = 8
    has_bias: bool = True


@dataclass(frozen=True)
class SeparableConv2d:
    """Depthwise ``kernel x kernel`` followed by a pointwise 1x1, no activation between."""

    kernel: int = 3
    stride: int = 1
    out_channels: int = 8
    has_bias: bool = True


@dataclass(frozen=True)
class Dense:
    out_units: int
    has_bias: bool = True


@dataclass(frozen=True)
class BatchNorm:
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    """Output marker. Passes logits through; the softmax lives in the loss."""


@dataclass(frozen=True)
class AddJoin:
    """``(1 - lam) * x + lam * y`` with ``x`` on port 0. ``lam`` is a weight."""


@dataclass(frozen=True)
class ConcatJoin:
    pass


LayerKind = Union[Input, Conv2d, SeparableConv2d, Dense, BatchNorm, ReLU, MaxPool,
                  GlobalAvgPool, SoftmaxHead, AddJoin, ConcatJoin]

KINDS = {cls.__name__: cls for cls in (Input, Conv2d, SeparableConv2d, Dense, BatchNorm, ReLU,
                                       MaxPool, GlobalAvgPool, SoftmaxHead, AddJoin, ConcatJoin)}
JOINS = (AddJoin, ConcatJoin)
CONVS = (Conv2d, SeparableConv2d)

# Learnable entries of a layer's weight dict; BatchNorm also carries "mean"/"var".
LEARNABLE = ("w", "b", "dw", "pw", "scale", "shift", "lam")
# Entries that receive weight decay.
DECAYED = ("w", "dw", "pw")


def is_weighted(kind) -> bool:
    return isinstance(kind, (Conv2d, SeparableConv2d, Dense, BatchNorm, AddJoin))


def _conv_out(size, kernel, stride):
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def output_shape(kind, in_shapes, layer="?"):
    """Per-example output shape of ``kind`` given per-example input shapes."""
    n_in = len(in_shapes)
    if isinstance(kind, JOINS):
        need = "exactly 2" if isinstance(kind, AddJoin) else "at least 2"
        if (n_in != 2) if isinstance(kind, AddJoin) else (n_in < 2):
            raise ShapeError(layer, f"join needs {need} inputs", dims=n_in)
    elif isinstance(kind, Input):
        raise ShapeError(layer, "input node has no computed shape")
    elif n_in != 1:
        raise ShapeError(layer, "expected exactly one input", dims=n_in)
    x = in_shapes[0]

    if isinstance(kind, (Conv2d, SeparableConv2d)):
        if len(x) != 3:
            raise ShapeError(layer, "convolution needs a (C, H, W) input", dims=x)
        if kind.kernel < 1 or kind.stride < 1 or kind.out_channels < 1:
            raise ShapeError(layer, "kernel, stride and out_channels must be >= 1")
        h, w = _conv_out(x[1], kind.kernel, kind.stride), _conv_out(x[2], kind.kernel, kind.stride)
        if h < 1 or w < 1:
            raise ShapeError(layer, "spatial size collapses", dims=x)
        return (kind.out_channels, h, w)
    if isinstance(kind, Dense):
        if len(x) != 1:
            raise ShapeError(layer, "dense needs a flat input", dims=x)
        return (kind.out_units,)
    if isinstance(kind, (BatchNorm, ReLU, SoftmaxHead)):
        return tuple(x)
    if isinstance(kind, MaxPool):
        if len(x) != 3:
            raise ShapeError(layer, "pooling needs a (C, H, W) input", dims=x)
        h, w = (x[1] - kind.kernel) // kind.stride + 1, (x[2] - kind.kernel) // kind.stride + 1
        if h < 1 or w < 1:
            raise ShapeError(layer, "spatial size collapses", dims=x)
        return (x[0], h, w)
    if isinstance(kind, GlobalAvgPool):
        if len(x) != 3:
            raise ShapeError(layer, "global pooling needs a (C, H, W) input", dims=x)
        return (x[0],)
    if isinstance(kind, AddJoin):
        if tuple(in_shapes[0]) != tuple(in_shapes[1]):
            raise ShapeError(layer, "add join needs equal shapes", dims=in_shapes)
        return tuple(x)
    if isinstance(kind, ConcatJoin):
        if any(len(s) != 3 for s in in_shapes) or len({tuple(s[1:]) for s in in_shapes}) != 1:
            raise ShapeError(layer, "concat join needs equal spatial dims", dims=in_shapes)
        return (sum(s[0] for s in in_shapes),) + tuple(x[1:])
    raise ShapeError(layer, f"unknown layer kind {kind!r}")


def param_shapes(kind, in_shapes):
    """Learnable parameter shapes of a layer (BatchNorm statistics excluded)."""
    if isinstance(kind, Conv2d):
        c = in_shapes[0][0]
        shapes = {"w": (kind.out_channels, c, kind.kernel, kind.kernel)}
        if kind.has_bias:
            shapes["b"] = (kind.out_channels,)
        return shapes
    if isinstance(kind, SeparableConv2d):
        c = in_shapes[0][0]
        shapes = {"dw": (c, 1, kind.kernel, kind.kernel), "pw": (kind.out_channels, c, 1, 1)}
        if kind.has_bias:
            shapes["b"] = (kind.out_channels,)
        return shapes
    if isinstance(kind, Dense):
        shapes = {"w": (kind.out_units, in_shapes[0][0])}
        if kind.has_bias:
            shapes["b"] = (kind.out_units,)
        return shapes
    if isinstance(kind, BatchNorm):
        c = in_shapes[0][0]
        return {"scale": (c,), "shift": (c,)}
    if isinstance(kind, AddJoin):
        return {"lam": ()}
    return {}


def state_shapes(kind, in_shapes):
    if isinstance(kind, BatchNorm):
        c = in_shapes[0][0]
        return {"mean": (c,), "var": (c,)}
    return {}


def init_params(kind, in_shapes, rng, dtype=np.float64):
    """Fresh weights: He-normal convolutions, zero classifier, identity BatchNorm, lam = 0."""
    out = {}
    for name, shape in param_shapes(kind, in_shapes).items():
        if name == "w" and isinstance(kind, Conv2d):
            fan_in = shape[1] * shape[2] * shape[3]
            out[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name == "dw":
            out[name] = rng.normal(0.0, np.sqrt(2.0 / (shape[2] * shape[3])), size=shape)
        elif name == "pw":
            out[name] = rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
        elif name == "scale":
            out[name] = np.ones(shape)
        else:
            # Dense weights start at zero so an untrained network carries no label information.
            out[name] = np.zeros(shape)
    for name, shape in state_shapes(kind, in_shapes).items():
        out[name] = np.zeros(shape) if name == "mean" else np.ones(shape)
    return {k: np.asarray(v, dtype=dtype) for k, v in out.items()}


def _need(params, names, layer):
    for n in names:
        if n not in params:
            raise MissingWeightsError(layer, n)


# --------------------------------------------------------------------------- kernels


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# Convolutions work on a channel-major copy ``(C, N, Hp, Wp)`` of the padded input and on
# im2col columns laid out ``(C, k, k, N, Ho, Wo)``, so that both the gather and the
# adjoint scatter move contiguous slabs and the products are plain (batched) matmuls.


def _gather(x, k, stride):
    """Return ``(cols, padded_shape)`` with ``cols`` of shape ``(C, k*k, N*Ho*Wo)``."""
    xt = np.ascontiguousarray(_pad(x, k // 2).transpose(1, 0, 2, 3))
    c, n, hp, wp = xt.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=xt.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride,
                               j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(c, k * k, n * ho * wo), xt.shape


def _scatter(gcol, padded_shape, k, stride, ho, wo):
    """Adjoint of :func:`_gather`: ``gcol`` ``(C, k*k, N*Ho*Wo)`` back to ``(N, C, H, W)``."""
    c, n, hp, wp = padded_shape
    gcol = gcol.reshape(c, k, k, n, ho, wo)
    dxt = np.zeros(padded_shape, dtype=gcol.dtype)
    for i in range(k):
        for j in range(k):
            dxt[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += gcol[:, i, j]
    p = k // 2
    if p:
        dxt = dxt[:, :, p:-p, p:-p]
    return dxt.transpose(1, 0, 2, 3)


def _to_nchw(flat, n, ho, wo):
    """``(C, N*Ho*Wo)`` to a contiguous ``(N, C, Ho, Wo)`` array."""
    return np.ascontiguousarray(flat.reshape(-1, n, ho, wo).transpose(1, 0, 2, 3))


def _to_cm(g):
    """``(N, C, H, W)`` to a contiguous ``(C, N*H*W)`` array."""
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(g.shape[1], -1)


def _out_size(shape, k, stride):
    return (shape[2] - k) // stride + 1, (shape[3] - k) // stride + 1


def _conv_forward(x, w, stride):
    k = w.shape[2]
    cols, pshape = _gather(x, k, stride)
    ho, wo = _out_size(pshape, k, stride)
    out = w.reshape(w.shape[0], -1) @ cols.reshape(-1, cols.shape[2])
    return _to_nchw(out, x.shape[0], ho, wo), (pshape, cols)


def _conv_backward(g, w, stride, cache):
    pshape, cols = cache
    cout, k = w.shape[0], w.shape[2]
    gt = _to_cm(g)
    flat = cols.reshape(-1, cols.shape[2])
    dw = (gt @ flat.T).reshape(w.shape)
    gcol = w.reshape(cout, -1).T @ gt
    return _scatter(gcol, pshape, k, stride, *g.shape[2:]), dw


def _separable_forward(x, dw, pw, stride):
    k = dw.shape[2]
    cols, pshape = _gather(x, k, stride)
    ho, wo = _out_size(pshape, k, stride)
    c = cols.shape[0]
    mid = (dw.reshape(c, 1, k * k) @ cols)[:, 0, :]  # depthwise, (C, N*Ho*Wo)
    out = pw[:, :, 0, 0] @ mid
    return _to_nchw(out, x.shape[0], ho, wo), (pshape, cols, mid)


def _separable_backward(g, dw, pw, stride, cache):
    pshape, cols, mid = cache
    k = dw.shape[2]
    c = cols.shape[0]
    gt = _to_cm(g)
    dpw = (gt @ mid.T)[:, :, None, None]
    dmid = pw[:, :, 0, 0].T @ gt
    ddw = (cols @ dmid[:, :, None]).reshape(dw.shape)
    gcol = dw.reshape(c, k * k, 1) * dmid[:, None, :]
    return _scatter(gcol, pshape, k, stride, *g.shape[2:]), ddw, dpw


def _channel_sum(x):
    return np.einsum("nchw->c", x) if x.ndim == 4 else x.sum(axis=0)


def _bcast(v, x):
    return v.reshape((1, -1, 1, 1)) if x.ndim == 4 else v.reshape((1, -1))


def forward(kind, params, inputs, mode, layer="?"):
    """Evaluate one layer. Returns ``(output, cache)``; the cache feeds :func:`backward`."""
    x = inputs[0]
    if isinstance(kind, Conv2d):
        _need(params, ["w"] + (["b"] if kind.has_bias else []), layer)
        w = params["w"]
        if x.ndim != 4 or w.shape[1] != x.shape[1]:
            raise ShapeError(layer, "input channels do not match weights",
                             dims=(tuple(x.shape), tuple(w.shape)))
        out, cache = _conv_forward(x, w, kind.stride)
        if kind.has_bias:
            out = out + params["b"].reshape(1, -1, 1, 1)
        return out, cache
    if isinstance(kind, SeparableConv2d):
        _need(params, ["dw", "pw"] + (["b"] if kind.has_bias else []), layer)
        if x.ndim != 4 or params["dw"].shape[0] != x.shape[1]:
            raise ShapeError(layer, "input channels do not match weights",
                             dims=(tuple(x.shape), tuple(params["dw"].shape)))
        out, cache = _separable_forward(x, params["dw"], params["pw"], kind.stride)
        if kind.has_bias:
            out = out + params["b"].reshape(1, -1, 1, 1)
        return out, cache
    if isinstance(kind, Dense):
        _need(params, ["w"] + (["b"] if kind.has_bias else []), layer)
        if x.ndim != 2 or params["w"].shape[1] != x.shape[1]:
            raise ShapeError(layer, "input units do not match weights",
                             dims=(tuple(x.shape), tuple(params["w"].shape)))
        out = x @ params["w"].T
        if kind.has_bias:
            out = out + params["b"]
        return out, x
    if isinstance(kind, BatchNorm):
        _need(params, ("scale", "shift", "mean", "var"), layer)
        if x.shape[1] != params["scale"].shape[0]:
            raise ShapeError(layer, "channel count does not match weights",
                             dims=(tuple(x.shape), tuple(params["scale"].shape)))
        if mode == TRAIN:
            count = x.size // x.shape[1]
            mean = _channel_sum(x) / count
            xc = x - _bcast(mean, x)
            var = _channel_sum(xc * xc) / count
            m = kind.momentum
            # Moving statistics live in the weight store handed to us; the caller owns it.
            params["mean"][...] = m * params["mean"] + (1.0 - m) * mean
            params["var"][...] = m * params["var"] + (1.0 - m) * var
        else:
            mean, var = params["mean"], params["var"]
            xc = x - _bcast(mean, x)
        inv = 1.0 / np.sqrt(var + kind.epsilon)
        out = xc * _bcast(inv * params["scale"], x)
        out += _bcast(params["shift"], x)
        return out, (xc, inv, mode)
    if isinstance(kind, ReLU):
        return np.maximum(x, 0.0), x
    if isinstance(kind, MaxPool):
        k, s = kind.kernel, kind.stride
        ho, wo = (x.shape[2] - k) // s + 1, (x.shape[3] - k) // s + 1
        # window taps stacked in row-major order, so ties go to the first tap
        if k == s:
            n, c = x.shape[:2]
            win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
            taps = win.transpose(3, 5, 0, 1, 2, 4).reshape(k * k, n, c, ho, wo)
        else:
            taps = np.stack([x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                             for i in range(k) for j in range(k)])
        idx = taps.argmax(axis=0)
        out = np.take_along_axis(taps, idx[None], axis=0)[0]
        return out, (x.shape, idx)
    if isinstance(kind, GlobalAvgPool):
        return x.mean(axis=(2, 3)), x.shape
    if isinstance(kind, (SoftmaxHead, Input)):
        return x, None
    if isinstance(kind, AddJoin):
        _need(params, ("lam",), layer)
        if inputs[0].shape != inputs[1].shape:
            raise ShapeError(layer, "add join needs equal shapes",
                             dims=(tuple(inputs[0].shape), tuple(inputs[1].shape)))
        lam = params["lam"]
        return (1.0 - lam) * inputs[0] + lam * inputs[1], (inputs[0], inputs[1])
    if isinstance(kind, ConcatJoin):
        sizes = [t.shape[1] for t in inputs]
        try:
            return np.concatenate(inputs, axis=1), sizes
        except ValueError:
            raise ShapeError(layer, "concat join needs equal spatial dims",
                             dims=[tuple(t.shape) for t in inputs]) from None
    raise ShapeError(layer, f"unknown layer kind {kind!r}")


def backward(kind, params, cache, g):
    """Return ``(input_grads, param_grads)`` for one layer given the output gradient ``g``."""
    if isinstance(kind, Conv2d):
        dx, dw = _conv_backward(g, params["w"], kind.stride, cache)
        grads = {"w": dw}
        if kind.has_bias:
            grads["b"] = g.sum(axis=(0, 2, 3))
        return [dx], grads
    if isinstance(kind, SeparableConv2d):
        dx, ddw, dpw = _separable_backward(g, params["dw"], params["pw"], kind.stride, cache)
        grads = {"dw": ddw, "pw": dpw}
        if kind.has_bias:
            grads["b"] = g.sum(axis=(0, 2, 3))
        return [dx], grads
    if isinstance(kind, Dense):
        x = cache
        grads = {"w": g.T @ x}
        if kind.has_bias:
            grads["b"] = g.sum(axis=0)
        return [g @ params["w"]], grads
    if isinstance(kind, BatchNorm):
        xc, inv, mode = cache
        dshift = _channel_sum(g)
        dscale = _channel_sum(g * xc) * inv
        a = params["scale"] * inv
        if mode == TRAIN:
            # a * (g - mean(g) - xhat * mean(g * xhat)) with xhat = xc * inv
            m = g.size // g.shape[1]
            dx = g * _bcast(a, g)
            dx -= xc * _bcast(a * inv * dscale / m, g)
            dx -= _bcast(a * dshift / m, g)
        else:
            dx = g * _bcast(a, g)
        return [dx], {"scale": dscale, "shift": dshift}
    if isinstance(kind, ReLU):
        return [g * (cache > 0)], {}
    if isinstance(kind, MaxPool):
        x_shape, idx = cache
        k, s = kind.kernel, kind.stride
        n, c, ho, wo = idx.shape
        if k == s:
            taps = np.zeros((k * k, n, c, ho, wo), dtype=g.dtype)
            np.put_along_axis(taps, idx[None], g[None], axis=0)
            dx = np.zeros(x_shape, dtype=g.dtype)
            dx[:, :, :ho * k, :wo * k] = taps.reshape(k, k, n, c, ho, wo).transpose(
                2, 3, 4, 0, 5, 1).reshape(n, c, ho * k, wo * k)
            return [dx], {}
        dx = np.zeros(x_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += g * hit
        return [dx], {}
    if isinstance(kind, GlobalAvgPool):
        n, c, h, w = cache
        return [np.broadcast_to(g[:, :, None, None] / (h * w), cache).copy()], {}
    if isinstance(kind, (SoftmaxHead, Input)):
        return [g], {}
    if isinstance(kind, AddJoin):
        x, y = cache
        lam = params["lam"]
        return [(1.0 - lam) * g, lam * g], {"lam": np.asarray((g * (y - x)).sum())}
    if isinstance(kind, ConcatJoin):
        splits = np.cumsum(cache)[:-1]
        return list(np.split(g, splits, axis=1)), {}
    raise TypeError(f"unknown layer kind {kind!r}")


def eval_layer(kind, params, inputs, mode=INFER, layer="?"):
    """Evaluate a single layer and return its output."""
    return forward(kind, params, list(inputs), mode, layer)[0]
