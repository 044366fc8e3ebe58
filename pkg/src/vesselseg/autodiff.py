"""Dense float64 tensors with reverse-mode differentiation.

Tensors wrap numpy arrays; every differentiable operation records a backward
closure on a per-forward-pass tape (the graph is rebuilt each call, which the
dynamic KNN graphs require anyway). Volumes use the (batch, channel, depth,
height, width) layout; node-feature matrices are rank 2.

A tensor graph is confined to one thread; ops are pure functions of their
inputs and use fixed reduction orders, so repeated runs are bit-identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, DimensionMismatchError, VesselSegError

_GRAD_ENABLED = True

# im2col matrices below this size are kept for the backward pass instead of
# being rebuilt; larger ones are recomputed to bound tape memory.
COL_CACHE_BYTES = 256 * 1024 * 1024

_SPATIAL_AXES = ("depth", "height", "width")


@contextmanager
def no_grad():
    """Disable tape recording inside the context (inference / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._backward_fn = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients into every reachable tensor with requires_grad."""
        if not self.requires_grad:
            raise VesselSegError("backward() on a tensor that does not require grad")
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: np.ndarray, own: bool) -> None:
    """Add g into t.grad. own=True means g is a fresh array the tape may keep."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _wrap(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if req:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward())
    return Tensor(data)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    """3D convolution weights.

    kernel is (out_ch, in_ch, kd, kh, kw). For conv3d the bias length must be
    out_ch; conv_transpose3d runs in the adjoint direction, so its output has
    in_ch channels and the bias length must be in_ch.
    """

    kernel: Tensor
    bias: Tensor | None
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]

    def __post_init__(self):
        if self.kernel.ndim != 5 or min(self.kernel.shape) < 1:
            raise ConfigError(f"conv kernel must be rank 5 with positive dims, got {self.kernel.shape}")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"stride entries must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ConfigError(f"padding entries must be >= 0, got {self.padding}")


@dataclass
class LinearParams:
    """Affine map weights: weight is (out_features, in_features)."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ConfigError(f"linear weight must be rank 2, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatchError("out_features", self.weight.shape[0], self.bias.shape[0])


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def make_conv(rng, out_ch, in_ch, kernel, stride=(1, 1, 1), padding=(0, 0, 0), bias=True) -> ConvParams:
    k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
    w = Tensor(uniform_init(rng, (out_ch, in_ch) + k, in_ch * k[0] * k[1] * k[2]), requires_grad=True)
    b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
    return ConvParams(w, b, tuple(stride), tuple(padding))


def make_conv_transpose(rng, in_ch, out_ch, kernel, stride=(1, 1, 1), padding=(0, 0, 0), bias=True) -> ConvParams:
    """Transposed-conv layer mapping in_ch -> out_ch; kernel stored (in_ch, out_ch, ...)."""
    k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
    w = Tensor(uniform_init(rng, (in_ch, out_ch) + k, in_ch * k[0] * k[1] * k[2]), requires_grad=True)
    b = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
    return ConvParams(w, b, tuple(stride), tuple(padding))


def make_linear(rng, out_features, in_features) -> LinearParams:
    w = Tensor(uniform_init(rng, (out_features, in_features), in_features), requires_grad=True)
    return LinearParams(w, Tensor(np.zeros(out_features), requires_grad=True))


# ---------------------------------------------------------------------------
# convolution machinery


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    if pd == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kdims, stride):
    """(B, C, Dp, Hp, Wp) -> column matrix (B*Do*Ho*Wo, C*kd*kh*kw)."""
    v = sliding_window_view(xp, kdims, axis=(2, 3, 4))
    v = v[:, :, :: stride[0], :: stride[1], :: stride[2]]
    out_spatial = v.shape[2:5]
    col = np.ascontiguousarray(v.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    return col.reshape(-1, xp.shape[1] * kdims[0] * kdims[1] * kdims[2]), out_spatial


def _conv_raw(x: np.ndarray, w: np.ndarray, stride, padding, bias: np.ndarray | None = None):
    """Plain correlation; returns (output, col, out_spatial)."""
    xp = _pad_spatial(x, padding)
    col, out_spatial = _im2col(xp, w.shape[2:], stride)
    y = col @ w.reshape(w.shape[0], -1).T
    if bias is not None:
        y += bias
    out = np.ascontiguousarray(
        y.reshape(x.shape[0], *out_spatial, w.shape[0]).transpose(0, 4, 1, 2, 3)
    )
    return out, col, out_spatial


def _flip_swap(w: np.ndarray) -> np.ndarray:
    """Swap in/out channels and flip the spatial taps (the adjoint kernel)."""
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


def _scatter_dilate(g: np.ndarray, stride, full_spatial) -> np.ndarray:
    """Place entries of g on the stride grid of a zero array of full_spatial."""
    out = np.zeros(g.shape[:2] + tuple(full_spatial))
    out[:, :, :: stride[0], :: stride[1], :: stride[2]][
        :, :, : g.shape[2], : g.shape[3], : g.shape[4]
    ] = g
    return out


def _tiled_col_scatter(cols: np.ndarray, batch, channels, windows, kdims) -> np.ndarray:
    """Inverse of _im2col for non-overlapping tilings (stride == kernel, no pad).

    cols is (B*Do*Ho*Wo, C*kd*kh*kw); each window owns its voxels exactly once,
    so the inverse is a pure reindexing.
    """
    do, ho, wo = windows
    kd, kh, kw = kdims
    out = np.empty((batch, channels, do * kd, ho * kh, wo * kw))
    view = out.reshape(batch, channels, do, kd, ho, kh, wo, kw)
    view[...] = cols.reshape(batch, do, ho, wo, channels, kd, kh, kw).transpose(0, 4, 1, 5, 2, 6, 3, 7)
    return out


def _is_tiling(w_shape, stride, padding, in_spatial, out_spatial) -> bool:
    k = w_shape[2:]
    return (
        tuple(stride) == tuple(k)
        and tuple(padding) == (0, 0, 0)
        and all(in_spatial[i] == out_spatial[i] * stride[i] for i in range(3))
    )


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride, padding, in_spatial):
    """Gradient of conv3d wrt its input.

    Non-overlapping tilings scatter W^T g straight back through the column
    transform; the general case dilates g to the stride grid and runs a full
    correlation with the flipped kernel, then crops the padding border.
    """
    kd, kh, kw = w.shape[2:]
    if _is_tiling(w.shape, stride, padding, in_spatial, g.shape[2:]):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, w.shape[0])
        return _tiled_col_scatter(g2 @ w.reshape(w.shape[0], -1), g.shape[0], w.shape[1], g.shape[2:], (kd, kh, kw))
    padded = [in_spatial[i] + 2 * padding[i] for i in range(3)]
    grid = [padded[i] - (kd, kh, kw)[i] + 1 for i in range(3)]
    gfull = g if tuple(stride) == (1, 1, 1) and tuple(grid) == g.shape[2:] else _scatter_dilate(g, stride, grid)
    gx_pad, _, _ = _conv_raw(gfull, _flip_swap(w), (1, 1, 1), (kd - 1, kh - 1, kw - 1))
    if not any(padding):
        return gx_pad
    pd, ph, pw = padding
    return np.ascontiguousarray(
        gx_pad[:, :, pd : pd + in_spatial[0], ph : ph + in_spatial[1], pw : pw + in_spatial[2]]
    )


def _check_rank5(x: Tensor, name: str) -> None:
    if x.ndim != 5:
        raise DimensionMismatchError("rank", 5, x.ndim)


def conv3d(x: Tensor, params: ConvParams) -> Tensor:
    """Strided zero-padded 3D convolution (cross-correlation)."""
    _check_rank5(x, "conv3d")
    w, b = params.kernel, params.bias
    if x.shape[1] != w.shape[1]:
        raise DimensionMismatchError("channel", w.shape[1], x.shape[1])
    if b is not None and b.shape[0] != w.shape[0]:
        raise DimensionMismatchError("out_channel", w.shape[0], b.shape[0])
    for i in range(3):
        if x.shape[2 + i] + 2 * params.padding[i] < w.shape[2 + i]:
            raise DimensionMismatchError(_SPATIAL_AXES[i], f">= {w.shape[2 + i] - 2 * params.padding[i]}", x.shape[2 + i])

    out, col, out_spatial = _conv_raw(
        x.data, w.data, params.stride, params.padding, None if b is None else b.data
    )
    parents = (x, w) if b is None else (x, w, b)

    def backward():
        cached_col = col if col.nbytes <= COL_CACHE_BYTES else None
        x_data, in_spatial = x.data, x.shape[2:]

        def fn(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, w.shape[0])
            if w.requires_grad:
                c = cached_col
                if c is None:
                    c, _ = _im2col(_pad_spatial(x_data, params.padding), w.shape[2:], params.stride)
                _accum(w, (g2.T @ c).reshape(w.shape), own=True)
            if b is not None and b.requires_grad:
                _accum(b, g2.sum(axis=0), own=True)
            if x.requires_grad:
                _accum(x, _conv_input_grad(g, w.data, params.stride, params.padding, in_spatial), own=True)

        return fn

    return _wrap(out, parents, backward)


def conv_transpose3d(y: Tensor, params: ConvParams) -> Tensor:
    """Adjoint of conv3d with the same params; maps out_ch -> in_ch channels."""
    _check_rank5(y, "conv_transpose3d")
    w, b = params.kernel, params.bias
    if y.shape[1] != w.shape[0]:
        raise DimensionMismatchError("channel", w.shape[0], y.shape[1])
    if b is not None and b.shape[0] != w.shape[1]:
        raise DimensionMismatchError("out_channel", w.shape[1], b.shape[0])
    kd, kh, kw = w.shape[2:]
    for i in range(3):
        n = (y.shape[2 + i] - 1) * params.stride[i] - 2 * params.padding[i] + w.shape[2 + i]
        if n < 1:
            raise DimensionMismatchError(_SPATIAL_AXES[i], "transpose output >= 1", n)

    out_spatial = tuple(
        (y.shape[2 + i] - 1) * params.stride[i] - 2 * params.padding[i] + w.shape[2 + i]
        for i in range(3)
    )
    if _is_tiling(w.shape, params.stride, params.padding, out_spatial, y.shape[2:]):
        y2 = np.ascontiguousarray(y.data.transpose(0, 2, 3, 4, 1)).reshape(-1, w.shape[0])
        z = _tiled_col_scatter(
            y2 @ w.data.reshape(w.shape[0], -1), y.shape[0], w.shape[1], y.shape[2:], (kd, kh, kw)
        )
    else:
        grid = [(y.shape[2 + i] - 1) * params.stride[i] + 1 for i in range(3)]
        yd = _scatter_dilate(y.data, params.stride, grid)
        z_full, _, _ = _conv_raw(yd, _flip_swap(w.data), (1, 1, 1), (kd - 1, kh - 1, kw - 1))
        pd, ph, pw = params.padding
        sd, sh, sw = z_full.shape[2:]
        z = np.ascontiguousarray(z_full[:, :, pd : sd - pd, ph : sh - ph, pw : sw - pw])
    if b is not None:
        z += b.data.reshape(1, -1, 1, 1, 1)
    parents = (y, w) if b is None else (y, w, b)

    def backward():
        y_data = y.data

        def fn(g):
            if y.requires_grad:
                gy, _, _ = _conv_raw(g, w.data, params.stride, params.padding)
                _accum(y, gy, own=True)
            if w.requires_grad:
                col_g, _ = _im2col(_pad_spatial(g, params.padding), w.shape[2:], params.stride)
                y2 = np.ascontiguousarray(y_data.transpose(0, 2, 3, 4, 1)).reshape(-1, w.shape[0])
                _accum(w, (y2.T @ col_g).reshape(w.shape), own=True)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3, 4)), own=True)

        return fn

    return _wrap(z, parents, backward)


# ---------------------------------------------------------------------------
# normalization and activations


def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (batch, channel) normalization over the spatial voxels."""
    _check_rank5(x, "instance_norm3d")
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionMismatchError("channel", c, gamma.shape[0] if gamma.ndim else 0)
    if beta.shape != (c,):
        raise DimensionMismatchError("channel", c, beta.shape[0] if beta.ndim else 0)

    mu = x.data.mean(axis=(2, 3, 4), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = gamma.data.reshape(1, c, 1, 1, 1) * xh + beta.data.reshape(1, c, 1, 1, 1)

    def backward():
        def fn(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xh).sum(axis=(0, 2, 3, 4)), own=True)
            if beta.requires_grad:
                _accum(beta, g.sum(axis=(0, 2, 3, 4)), own=True)
            if x.requires_grad:
                gxh = g * gamma.data.reshape(1, c, 1, 1, 1)
                m1 = gxh.mean(axis=(2, 3, 4), keepdims=True)
                m2 = (gxh * xh).mean(axis=(2, 3, 4), keepdims=True)
                _accum(x, inv * (gxh - m1 - xh * m2), own=True)

        return fn

    return _wrap(out, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward():
        mask = x.data > 0

        def fn(g):
            _accum(x, g * mask, own=True)

        return fn

    return _wrap(out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi_cdf

    def backward():
        xd = x.data

        def fn(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            _accum(x, g * (phi_cdf + xd * pdf), own=True)

        return fn

    return _wrap(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward():
        def fn(g):
            _accum(x, g * out * (1.0 - out), own=True)

        return fn

    return _wrap(out, (x,), backward)


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def pointwise_activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown activation '{kind}'") from None


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def linear(x: Tensor, params: LinearParams) -> Tensor:
    """Row-wise affine map of an (N, C_in) feature matrix."""
    if x.ndim != 2:
        raise DimensionMismatchError("rank", 2, x.ndim)
    w, b = params.weight, params.bias
    if x.shape[1] != w.shape[1]:
        raise DimensionMismatchError("in_features", w.shape[1], x.shape[1])
    out = x.data @ w.data.T + b.data

    def backward():
        def fn(g):
            if x.requires_grad:
                _accum(x, g @ w.data, own=True)
            if w.requires_grad:
                _accum(w, g.T @ x.data, own=True)
            if b.requires_grad:
                _accum(b, g.sum(axis=0), own=True)

        return fn

    return _wrap(out, (x, w, b), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial voxels; output spatial dims are 1x1x1."""
    _check_rank5(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3, 4), keepdims=True)
    voxels = x.shape[2] * x.shape[3] * x.shape[4]

    def backward():
        def fn(g):
            _accum(x, np.broadcast_to(g / voxels, x.shape).copy(), own=True)

        return fn

    return _wrap(out, (x,), backward)


def softmax_channel(x: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis, max-shifted for stability."""
    _check_rank5(x, "softmax_channel")
    if x.shape[1] < 2:
        raise DimensionMismatchError("channel", ">= 2", x.shape[1])
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward():
        def fn(g):
            dot = (g * out).sum(axis=1, keepdims=True)
            _accum(x, out * (g - dot), own=True)

        return fn

    return _wrap(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionMismatchError("shape", a.shape, b.shape)
    out = a.data + b.data

    def backward():
        def fn(g):
            _accum(a, g, own=False)
            _accum(b, g, own=False)

        return fn

    return _wrap(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def backward():
        def fn(g):
            _accum(x, g * c, own=True)

        return fn

    return _wrap(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward():
        sizes = [t.shape[axis] for t in tensors]

        def fn(g):
            start = 0
            for t, n in zip(tensors, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                _accum(t, np.ascontiguousarray(g[tuple(sl)]), own=True)
                start += n

        return fn

    return _wrap(out, tuple(tensors), backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    out = np.ascontiguousarray(x.data[:, lo:hi])

    def backward():
        def fn(g):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            _accum(x, gx, own=True)

        return fn

    return _wrap(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward():
        def fn(g):
            _accum(x, g.reshape(x.shape), own=False)

        return fn

    return _wrap(out, (x,), backward)


def broadcast_mul_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Elementwise product of (B,C,D,H,W) features with a (B,C,1,1,1) gate."""
    _check_rank5(x, "broadcast_mul_channels")
    if gate.shape != x.shape[:2] + (1, 1, 1):
        raise DimensionMismatchError("gate", x.shape[:2] + (1, 1, 1), gate.shape)
    out = x.data * gate.data

    def backward():
        def fn(g):
            if x.requires_grad:
                _accum(x, g * gate.data, own=True)
            if gate.requires_grad:
                _accum(gate, (g * x.data).sum(axis=(2, 3, 4), keepdims=True), own=True)

        return fn

    return _wrap(out, (x, gate), backward)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum()

    def backward():
        def fn(g):
            _accum(x, np.full(x.shape, float(g)), own=True)

        return fn

    return _wrap(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def weighted_sum(terms: list[Tensor], weights) -> Tensor:
    """Weighted sum of scalar tensors."""
    out = sum(w * t.data for w, t in zip(weights, terms))

    def backward():
        def fn(g):
            for w, t in zip(weights, terms):
                _accum(t, g * w, own=True)

        return fn

    return _wrap(np.asarray(out), tuple(terms), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(fn, inputs: list[Tensor], step: float = 1e-5, floor: float = 1e-8) -> float:
    """Compare the tape gradient of a scalar-valued fn against central differences.

    Returns the worst relative error over every element of every input, with
    the denominator floored to avoid blowups near zero. Inputs are perturbed
    in place and restored. Raises on non-finite values.
    """
    out = fn(*inputs)
    if out.size != 1:
        raise VesselSegError("gradient_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise VesselSegError("non-finite forward value in gradient_check")
    for t in inputs:
        t.grad = None
    out.backward()
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_hi = float(fn(*inputs).data)
                flat[i] = orig - step
                f_lo = float(fn(*inputs).data)
            flat[i] = orig
            if not (math.isfinite(f_hi) and math.isfinite(f_lo)):
                raise VesselSegError("non-finite value during finite differencing")
            numeric = (f_hi - f_lo) / (2.0 * step)
            denom = max(abs(g[i]), abs(numeric), floor)
            worst = max(worst, abs(g[i] - numeric) / denom)
    return worst
