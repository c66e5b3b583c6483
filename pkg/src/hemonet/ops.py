"""Differentiable primitives over :class:`hemonet.tensor.Tensor`.

Every function builds the forward value eagerly with numpy and attaches a
closure that scatters the incoming gradient to the parents.  Gradients are
only computed for parents that require them, so frozen parameters and raw
input batches cost nothing on the way back.

Convolution is evaluated as one flattened patch-matrix multiplied against
the flattened kernel (im2col), which keeps the heavy lifting inside BLAS.
"""

from __future__ import annotations

import numbers
from typing import Sequence

import numpy as np

from .tensor import Tensor, accumulate_grad, as_tensor

LOG_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, numbers.Number):
        out = Tensor(a.data + b, requires_grad=a.requires_grad, _parents=(a,))

        def grad_fn(g):
            if a.requires_grad:
                accumulate_grad(a, g)

        out._grad_fn = grad_fn
        return out

    b = as_tensor(b)
    out = Tensor(
        a.data + b.data,
        requires_grad=a.requires_grad or b.requires_grad,
        _parents=(a, b),
    )

    def grad_fn(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g, b.data.shape))

    out._grad_fn = grad_fn
    return out


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, numbers.Number):
        out = Tensor(a.data * b, requires_grad=a.requires_grad, _parents=(a,))

        def grad_fn(g):
            if a.requires_grad:
                accumulate_grad(a, g * b)

        out._grad_fn = grad_fn
        return out

    b = as_tensor(b)
    out = Tensor(
        a.data * b.data,
        requires_grad=a.requires_grad or b.requires_grad,
        _parents=(a, b),
    )

    def grad_fn(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    """Logistic function, clamped into the open interval (0, 1).

    The clamp keeps saturated activations strictly inside (0, 1) at any
    float width; where it bites, the true gradient is already ~0, so the
    backward pass uses the clamped value unchanged.
    """
    x = as_tensor(x)
    xd = x.data
    t = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    info = np.finfo(s.dtype)
    s = np.clip(s, info.tiny, 1.0 - info.epsneg)
    out = Tensor(s, requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g * s * (1.0 - s))

    out._grad_fn = grad_fn
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g * (x.data > 0))

    out._grad_fn = grad_fn
    return out


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """Rectifier with a small negative-side slope.

    Used where inputs are non-negative by construction (pooled rectified
    features), so units cannot start permanently dead.
    """
    x = as_tensor(x)
    out = Tensor(
        np.where(x.data > 0, x.data, slope * x.data),
        requires_grad=x.requires_grad,
        _parents=(x,),
    )

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g * np.where(x.data > 0, 1.0, slope))

    out._grad_fn = grad_fn
    return out


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument floored at ``floor``.

    Guarantees a finite result for any input in [0, 1]; the gradient is
    zero wherever the floor is active.
    """
    x = as_tensor(x)
    clamped = np.maximum(x.data, floor)
    out = Tensor(np.log(clamped), requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, np.where(x.data > floor, g / clamped, 0.0))

    out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(
        x.data.sum(axis=axis, keepdims=keepdims),
        requires_grad=x.requires_grad,
        _parents=(x,),
    )

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, _restore_axes(g, x.data.shape, axis, keepdims))

    out._grad_fn = grad_fn
    return out


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(out_data.size, 1)
    out = Tensor(out_data, requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, _restore_axes(g / count, x.data.shape, axis, keepdims))

    out._grad_fn = grad_fn
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g.reshape(x.data.shape))

    out._grad_fn = grad_fn
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(
        np.concatenate([t.data for t in ts], axis=axis),
        requires_grad=any(t.requires_grad for t in ts),
        _parents=tuple(ts),
    )
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                accumulate_grad(t, g[tuple(idx)])

    out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# affine / convolution / pooling
# ---------------------------------------------------------------------------

def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape (batch, features)."""
    x, w = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"dense shape mismatch: input {x.data.shape} vs weight {w.data.shape}"
        )
    b = as_tensor(bias) if bias is not None else None
    data = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ValueError(
                f"dense bias shape {b.data.shape} does not match weight {w.data.shape}"
            )
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents)

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g @ w.data.T)
        if w.requires_grad:
            accumulate_grad(w, x.data.T @ g)
        if b is not None and b.requires_grad:
            accumulate_grad(b, g.sum(axis=0))

    out._grad_fn = grad_fn
    return out


def _conv_geometry(H, W, kH, kW, stride, padding):
    if padding == "valid":
        if kH > H or kW > W:
            raise ValueError(
                f"conv2d kernel ({kH}x{kW}) larger than input ({H}x{W}) with valid padding"
            )
        return (H - kH) // stride + 1, (W - kW) // stride + 1, 0, 0, 0, 0
    if padding == "same":
        Ho = -(-H // stride)
        Wo = -(-W // stride)
        ph = max((Ho - 1) * stride + kH - H, 0)
        pw = max((Wo - 1) * stride + kW - W, 0)
        return Ho, Wo, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ValueError(f"conv2d padding must be 'valid' or 'same', got {padding!r}")


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "valid") -> Tensor:
    """2D cross-correlation.

    ``x``: (batch, C_in, H, W) or (C_in, H, W); ``kernel``: (C_out, C_in, kH, kW);
    optional ``bias``: (C_out,).  Differentiable w.r.t. input, kernel and bias.
    """
    x, k = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 3
    xin = x.data[None] if squeeze else x.data
    if xin.ndim != 4 or k.data.ndim != 4 or xin.shape[1] != k.data.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.data.shape} vs kernel {k.data.shape}"
        )
    B, C_in, H, W = xin.shape
    C_out, _, kH, kW = k.data.shape
    Ho, Wo, pt, pb, pl, pr = _conv_geometry(H, W, kH, kW, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(
            f"conv2d produces empty output for input {x.data.shape} and kernel {k.data.shape}"
        )

    if pt or pb or pl or pr:
        xp = np.pad(xin, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = xin
    # im2col: every receptive field as one row, then a single BLAS matmul.
    sB, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, Ho, Wo, C_in, kH, kW),
        strides=(sB, stride * sH, stride * sW, sC, sH, sW),
        writeable=False,
    )
    cols = np.ascontiguousarray(win).reshape(B * Ho * Wo, C_in * kH * kW)
    kmat = k.data.reshape(C_out, -1).T
    flat = cols @ kmat
    b = as_tensor(bias) if bias is not None else None
    if b is not None:
        if b.data.shape != (C_out,):
            raise ValueError(
                f"conv2d bias shape {b.data.shape} does not match kernel {k.data.shape}"
            )
        flat = flat + b.data
    data = flat.reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2)
    if squeeze:
        data = data[0]
    parents = (x, k) if b is None else (x, k, b)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents)

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gflat = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, C_out)
        if b is not None and b.requires_grad:
            accumulate_grad(b, gflat.sum(axis=0))
        if k.requires_grad:
            accumulate_grad(k, (cols.T @ gflat).T.reshape(C_out, C_in, kH, kW))
        if x.requires_grad:
            dcols = (gflat @ kmat.T).reshape(B, Ho, Wo, C_in, kH, kW)
            dxp = np.zeros_like(xp)
            for i in range(kH):
                for j in range(kW):
                    dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                        j : j + stride * (Wo - 1) + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pt : pt + H, pl : pl + W]
            accumulate_grad(x, dx[0] if squeeze else dx)

    out._grad_fn = grad_fn
    return out


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by ``size``.

    Gradient is routed to the first maximal element of each window.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d expects (batch, C, H, W), got {x.data.shape}")
    B, C, H, W = x.data.shape
    if H % size or W % size:
        raise ValueError(f"max_pool2d size {size} does not divide input {x.data.shape}")
    Ho, Wo = H // size, W // size
    tiles = (
        x.data.reshape(B, C, Ho, size, Wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, size * size)
    )
    arg = tiles.argmax(axis=-1)
    data = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    out = Tensor(data, requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            dt = np.zeros_like(tiles)
            np.put_along_axis(dt, arg[..., None], g[..., None], axis=-1)
            accumulate_grad(
                x,
                dt.reshape(B, C, Ho, Wo, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(B, C, H, W),
            )

    out._grad_fn = grad_fn
    return out


def nearest_upsample2d(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"nearest_upsample2d expects (batch, C, H, W), got {x.data.shape}")
    if factor < 1:
        raise ValueError(f"nearest_upsample2d factor must be >= 1, got {factor}")
    B, C, H, W = x.data.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor(data, requires_grad=x.requires_grad, _parents=(x,))

    def grad_fn(g):
        if x.requires_grad:
            accumulate_grad(x, g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)))

    out._grad_fn = grad_fn
    return out
