"""Differentiable operations over avcc.tensor.Tensor.

The set is exactly what the counting network needs: matmul, row-stable
softmax, conv2d (im2col), elementwise add/mul/relu plus the single
row-broadcast case, affine (scalar scale/shift), linear maps, structural ops
(transpose/permute/reshape/concat, average and adaptive pooling, bilinear
resize), batchnorm, dropout, log, clamp_min and full-sum reduction.

Broadcasting is deliberately limited to "row vector onto each row of a
matrix"; everything else must shape-match exactly.  Bilinear resampling uses
the half-pixel (align_corners=False) convention everywhere in the repo.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .tensor import Tensor, active_tape, as_tensor


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(out, inputs, backward)
        return out
    return Tensor(data)


def _grad_wanted(*tensors: Tensor) -> bool:
    return active_tape() is not None and any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(data, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map along the last axis: y = x @ W^T + b, W is (d_out, d_in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear: input last dim {x.shape} vs weight {weight.shape}")
    xf = x.data.reshape(-1, d_in)
    yf = xf @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        yf = yf + bias.data
    data = yf.reshape(x.shape[:-1] + (d_out,))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(-1, d_out)
        dx = (gf @ weight.data).reshape(x.shape)
        dw = gf.T @ xf
        if bias is None:
            return dx, dw
        return dx, dw, gf.sum(axis=0)

    return _emit(data, inputs, backward)


def softmax(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise


def _row_broadcastable(big: tuple, small: tuple) -> bool:
    if len(big) != 2:
        return False
    if small == (big[1],) or small == (1, big[1]):
        return True
    return False


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g, g

        return _emit(a.data + b.data, (a, b), backward)
    if _row_broadcastable(a.shape, b.shape):
        def backward(g):
            return g, g.sum(axis=0).reshape(b.shape)

        return _emit(a.data + b.data.reshape(1, -1), (a, b), backward)
    if _row_broadcastable(b.shape, a.shape):
        def backward(g):
            return g.sum(axis=0).reshape(a.shape), g

        return _emit(a.data.reshape(1, -1) + b.data, (a, b), backward)
    raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    return add(a, affine(b, scale=-1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            return g * b.data, g * a.data

        return _emit(a.data * b.data, (a, b), backward)
    if _row_broadcastable(a.shape, b.shape):
        brow = b.data.reshape(1, -1)

        def backward(g):
            return g * brow, (g * a.data).sum(axis=0).reshape(b.shape)

        return _emit(a.data * brow, (a, b), backward)
    if _row_broadcastable(b.shape, a.shape):
        arow = a.data.reshape(1, -1)

        def backward(g):
            return (g * b.data).sum(axis=0).reshape(a.shape), g * arow

        return _emit(arow * b.data, (a, b), backward)
    raise ShapeError(f"mul: cannot combine shapes {a.shape} and {b.shape}")


def affine(x, scale: float = 1.0, shift: float = 0.0) -> Tensor:
    """y = scale * x + shift with python-scalar coefficients."""
    x = as_tensor(x)
    s = x.data.dtype.type(scale)

    def backward(g):
        return (g * s,)

    return _emit(x.data * s + x.data.dtype.type(shift), (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _emit(data, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return _emit(np.log(x.data), (x,), backward)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); the subgradient at the floor is taken as 0."""
    x = as_tensor(x)
    data = np.maximum(x.data, floor)

    def backward(g):
        return (g * (x.data > floor),)

    return _emit(data, (x,), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)

    return _emit(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# structural


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _emit(x.data.T.copy(), (x,), backward)


def permute(x, axes: tuple) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(x.data, axes).copy(), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit(x.data.reshape(shape), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(data, tensors, backward)


def avg_pool2d(x, window: tuple) -> Tensor:
    """Non-overlapping average pooling over the two trailing axes of (c, h, w)."""
    x = as_tensor(x)
    k1, k2 = window
    c, h, w = x.shape
    if h % k1 or w % k2:
        raise ShapeError(f"avg_pool2d: shape {x.shape} not divisible by window {window}")
    o1, o2 = h // k1, w // k2
    data = x.data.reshape(c, o1, k1, o2, k2).mean(axis=(2, 4))

    def backward(g):
        expanded = np.broadcast_to(
            g[:, :, None, :, None] / (k1 * k2), (c, o1, k1, o2, k2)
        )
        return (expanded.reshape(c, h, w).astype(x.data.dtype, copy=True),)

    return _emit(data, (x,), backward)


from functools import lru_cache


@lru_cache(maxsize=128)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input window [floor(i*n/o), ceil((i+1)*n/o))."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * n_in // n_out, -(-(i + 1) * n_in // n_out)
        m[i, a:b] = 1.0 / (b - a)
    return m


def adaptive_avg_pool2d(x, out_size: tuple) -> Tensor:
    """Average pooling onto an arbitrary output grid (possibly uneven windows).

    The windows factor over the axes, so the pool is two matrix products.
    """
    x = as_tensor(x)
    o1, o2 = out_size
    _, h, w = x.shape
    r1 = _pool_matrix(h, o1).astype(x.data.dtype)
    r2 = _pool_matrix(w, o2).astype(x.data.dtype)
    data = np.matmul(np.matmul(r1, x.data), r2.T)

    def backward(g):
        return (np.matmul(r1.T, np.matmul(g, r2)),)

    return _emit(data, (x,), backward)


@lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel bilinear interpolation along one axis as a dense matrix."""
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - (src - i0))
    np.add.at(m, (rows, i1), src - i0)
    return m


def bilinear_resize(x, out_size: tuple) -> Tensor:
    """Bilinear resampling of the two trailing axes to out_size=(n1, n2)."""
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x3 = x.data[None]
    elif x.ndim == 3:
        x3 = x.data
    else:
        raise ShapeError(f"bilinear_resize expects rank 2 or 3, got {x.shape}")
    o1, o2 = int(out_size[0]), int(out_size[1])
    if o1 < 1 or o2 < 1:
        raise ConfigError(f"bilinear_resize: invalid target size {out_size}")
    _, h, w = x3.shape
    r1 = _resize_matrix(h, o1).astype(x.data.dtype)
    r2 = _resize_matrix(w, o2).astype(x.data.dtype)
    y = np.matmul(np.matmul(r1, x3), r2.T)
    data = y[0] if squeeze else y

    def backward(g):
        g3 = g[None] if squeeze else g
        dx = np.matmul(r1.T, np.matmul(g3, r2))
        return (dx[0] if squeeze else dx,)

    return _emit(data, (x,), backward)


def bilinear_upsample(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if int(factor) < 1:
        raise ConfigError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    f = int(factor)
    return bilinear_resize(x, (x.shape[-2] * f, x.shape[-1] * f))


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, f1, f2, s1, s2, o1, o2):
    c = xp.shape[0]
    cols = np.empty((c, f1, f2, o1, o2), dtype=xp.dtype)
    for u in range(f1):
        for v in range(f2):
            cols[:, u, v] = xp[:, u : u + s1 * o1 : s1, v : v + s2 * o2 : s2]
    return cols.reshape(c * f1 * f2, o1 * o2)


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of (c_in, h, w) with kernels (c_out, c_in, f1, f2)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    c_out, c_in, f1, f2 = weight.shape
    s1, s2 = stride
    p1, p2 = padding
    h, w = x.shape[1], x.shape[2]
    o1 = (h + 2 * p1 - f1) // s1 + 1
    o2 = (w + 2 * p2 - f2) // s2 + 1
    if o1 < 1 or o2 < 1 or h + 2 * p1 < f1 or w + 2 * p2 < f2:
        raise ConfigError(
            f"conv2d: kernel {f1}x{f2} stride {stride} padding {padding} gives "
            f"non-positive output for input {x.shape}"
        )
    inputs = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    if f1 == 1 and f2 == 1 and stride == (1, 1) and padding == (0, 0):
        # pointwise convolution is a single channel-mixing matmul
        xf = x.data.reshape(c_in, h * w)
        wf = weight.data.reshape(c_out, c_in)
        out = (wf @ xf).reshape(c_out, h, w)
        if bias is not None:
            out += inputs[2].data[:, None, None]
        if not _grad_wanted(*inputs):
            return Tensor(out)

        def backward_pointwise(g):
            gf = g.reshape(c_out, -1)
            dx = (wf.T @ gf).reshape(x.shape)
            dw = (gf @ xf.T).reshape(weight.shape)
            if bias is None:
                return dx, dw
            return dx, dw, g.sum(axis=(1, 2))

        result = Tensor(out, requires_grad=True)
        active_tape().record(result, inputs, backward_pointwise)
        return result

    xp = x.data
    if p1 or p2:
        xp = np.pad(x.data, ((0, 0), (p1, p1), (p2, p2)))
    cols = _im2col(xp, f1, f2, s1, s2, o1, o2)
    wf = weight.data.reshape(c_out, -1)
    out = (wf @ cols).reshape(c_out, o1, o2)
    if bias is not None:
        out += inputs[2].data[:, None, None]

    if not _grad_wanted(*inputs):
        return Tensor(out)

    def backward(g):
        gf = g.reshape(c_out, -1)
        dw = (gf @ cols.T).reshape(weight.shape)
        if not x.requires_grad:
            dx = None
        elif s1 == 1 and s2 == 1:
            # full correlation with the rotated kernel: one gather + one gemm
            q1, q2 = f1 - 1 - p1, f2 - 1 - p2
            gp = np.pad(g, ((0, 0), (q1, q1), (q2, q2)))
            gcols = _im2col(gp, f1, f2, 1, 1, h, w)
            wrot = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = (wrot.reshape(c_in, -1) @ gcols).reshape(x.shape)
        else:
            dcols = (wf.T @ gf).reshape(c_in, f1, f2, o1, o2)
            dxp = np.zeros_like(xp)
            for u in range(f1):
                for v in range(f2):
                    dxp[:, u : u + s1 * o1 : s1, v : v + s2 * o2 : s2] += dcols[:, u, v]
            dx = dxp[:, p1 : p1 + h, p2 : p2 + w] if (p1 or p2) else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(1, 2))

    result = Tensor(out, requires_grad=True)
    active_tape().record(result, inputs, backward)
    return result


# ---------------------------------------------------------------------------
# normalization / regularization


def batchnorm2d(x, gamma, beta, mean, var, training: bool,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (c, h, w) over the spatial axes.

    `mean`/`var` are the statistics to normalize with (the sample's own in
    training mode, running buffers in eval mode); the training flag selects
    the backward rule that differentiates through the batch statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c, h, w = x.shape
    n = h * w
    mu = mean
    ivar = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * ivar
    shift = beta.data - mu * scale
    data = x.data * scale[:, None, None] + shift[:, None, None]

    def backward(g):
        # dgamma/dbeta are the only reductions needed: with dxhat = g*gamma,
        # sum(dxhat) = gamma*dbeta and sum(dxhat*xhat) = gamma*dgamma.
        xhat = (x.data - mu[:, None, None]) * ivar[:, None, None]
        dbeta = np.einsum("chw->c", g)
        dgamma = np.einsum("chw,chw->c", g, xhat)
        if training:
            dx = scale[:, None, None] * (
                g - (dbeta[:, None, None] + xhat * dgamma[:, None, None]) / n)
        else:
            dx = scale[:, None, None] * g
        return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

    return _emit(data, (x, gamma, beta), backward)


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: identity in eval mode and at rate 0."""
    if not training or rate == 0.0:
        return as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def backward(g):
        return (g * mask,)

    return _emit(x.data * mask, (x,), backward)
