"""Dense float32 tensors with reverse-mode automatic differentiation.

Storage is always float32, row-major. Reductions and plain matrix products
accumulate in float64 before casting back; conv2d stays in float32 for speed.
Each operation that participates in differentiation records its parents and a
backward closure; ``backward`` on a scalar runs one topologically ordered
sweep over that graph.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigError,
    ContractError,
    DegenerateVectorError,
    DimensionError,
)

NORM_EPS = 1e-12

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op NaN/Inf guards (slow; meant for selftest/debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """A float32 n-d array plus an optional autodiff graph node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        """A view of the same buffer with no graph history and no grad."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite_guard(data: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("forward op produced non-finite values")


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result; record the graph only when a parent needs grad."""
    data = np.ascontiguousarray(data, dtype=np.float32)
    _finite_guard(data)
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bwd)


def scale(a, s: float) -> Tensor:
    return mul(a, float(s))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (out_data > 0),)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * np.maximum(out_data, NORM_EPS)),)

    return _make(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions (float64 accumulators)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(np.float32),)

    return _make(np.asarray(out_data), (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(np.float32),)

    return _make(np.asarray(out_data), (a,), bwd)


def mean_pool_2d(x) -> Tensor:
    """Global average over the two trailing spatial dims: (B,C,H,W) -> (B,C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"mean_pool_2d expects a 4-d map, got {x.shape}")
    return tmean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; 2-d or batched with broadcastable leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul expects >=2-d operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.shape} x {b.shape}"
        )
    out_data = np.matmul(
        a.data.astype(np.float64), b.data.astype(np.float64)
    )

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(out_data, (a, b), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def gather_rows(a, indices) -> Tensor:
    """Pick rows of a 2-d tensor by integer index (with repetition)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-d table, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bwd)


# ---------------------------------------------------------------------------
# normalization


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by per-row max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True, dtype=np.float64)

    def bwd(g):
        y = out_data.astype(np.float32)
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(out_data, (a,), bwd)


def l2_normalize(v) -> Tensor:
    """Normalize along the last axis to unit l2 norm."""
    v = as_tensor(v)
    norm = np.sqrt(
        (v.data.astype(np.float64) ** 2).sum(axis=-1, keepdims=True)
    )
    if np.any(norm < NORM_EPS):
        raise DegenerateVectorError("l2_normalize of a (near-)zero vector")
    norm = norm.astype(np.float32)
    out_data = v.data / norm

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return ((g - out_data * dot) / norm,)

    return _make(out_data, (v,), bwd)


def rowwise_l2norm(a) -> Tensor:
    """l2 norm of each row of a 2-d tensor; safe gradient at zero rows."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"rowwise_l2norm expects 2-d input, got {a.shape}")
    norm = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1))
    norm32 = norm.astype(np.float32)

    def bwd(g):
        denom = np.maximum(norm32, NORM_EPS)[:, None]
        return (g[:, None] * a.data / denom,)

    return _make(norm, (a,), bwd)


# ---------------------------------------------------------------------------
# conv / batchnorm


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B,C,H,W) with (O,C,kh,kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d operands, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape}")
    if (H + 2 * pad - kh) % stride or (W + 2 * pad - kw) % stride:
        raise ConfigError(
            f"conv2d output size is not integral for input {x.shape}, "
            f"kernel {w.shape}, stride {stride}, pad {pad}"
        )
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    out_data, cols = _conv_gemm(x.data, w.data, stride, pad, Ho, Wo)
    wmat = w.data.reshape(O, -1)

    def bwd(g):
        gw = gx = None
        if w.requires_grad:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
            gw = (g2 @ cols.T).reshape(O, C, kh, kw)
        if x.requires_grad:
            if stride == 1:
                # full correlation of the output grad with the flipped kernel
                w_flip = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                )
                gx, _ = _conv_gemm(g, w_flip, 1, kh - 1 - pad, H, W)
            else:
                g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
                dcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
                dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float32)
                for i in range(kh):
                    for j in range(kw):
                        dxp[
                            :, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride
                        ] += dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return gx, gw

    return _make(out_data, (x, w), bwd)


def _conv_gemm(xdata: np.ndarray, wdata: np.ndarray, stride: int, pad: int,
               Ho: int, Wo: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared im2col + GEMM kernel; returns (output map, patch matrix).

    Patches are laid out (C*kh*kw, B*Ho*Wo) and filled per kernel offset so
    every copy runs over contiguous row segments.
    """
    B, C = xdata.shape[:2]
    O, _, kh, kw = wdata.shape
    if pad:
        xdata = np.pad(xdata, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xdata[
                :, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride
            ].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    out = (wdata.reshape(O, -1) @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    return out, cols


def batch_norm(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training: bool,
    track_stats: bool = True,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all axes except axis 1 (the channel axis).

    Works for (B,D) feature matrices and (B,C,H,W) maps. ``running_mean`` and
    ``running_var`` are non-grad tensors mutated in place when ``training`` and
    ``track_stats`` are both set; eval mode normalizes with them instead.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"batch_norm scale/shift must have shape ({C},), got {gamma.shape}, {beta.shape}"
        )
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    n = x.size // C

    if training:
        mean = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        if track_stats:
            running_mean.data[:] = (
                momentum * running_mean.data + (1.0 - momentum) * mean
            ).astype(np.float32)
            running_var.data[:] = (
                momentum * running_var.data + (1.0 - momentum) * var
            ).astype(np.float32)
    else:
        mean = running_mean.data.astype(np.float64)
        var = running_var.data.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(np.float32).reshape(bshape)
    xhat = (x.data - mean.astype(np.float32).reshape(bshape)) * inv_std
    out_data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bwd(g):
        gxh = g * gamma.data.reshape(bshape)
        if training:
            # standard train-mode batchnorm backward through the batch stats
            sum_gxh = gxh.sum(axis=axes, keepdims=True)
            sum_gxh_xhat = (gxh * xhat).sum(axis=axes, keepdims=True)
            gx = (inv_std / n) * (n * gxh - sum_gxh - xhat * sum_gxh_xhat)
        else:
            gx = gxh * inv_std
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = gx.astype(np.float32) if x.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out_data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar; accumulates into ``.grad`` of graph nodes."""
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=np.float32)
    }
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float32).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# optimizer step


def sgd_momentum_step(
    param: Tensor,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD with momentum: v <- m*v + g; p <- p - lr*v."""
    g = np.asarray(grad, dtype=np.float32)
    if param.shape != g.shape or param.shape != velocity.shape:
        raise DimensionError(
            f"sgd step shape mismatch: param {param.shape}, grad {g.shape}, "
            f"velocity {velocity.shape}"
        )
    if weight_decay:
        g = g + np.float32(weight_decay) * param.data
    velocity *= np.float32(momentum)
    velocity += g
    param.data -= np.float32(lr) * velocity
