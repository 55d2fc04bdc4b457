"""Small reverse-mode autodiff core on top of numpy.

Every differentiable operation creates a node holding its parents and a
closure that maps the output gradient to one gradient per parent.  Nodes
carry a monotonically increasing id, so sorting the reachable graph by id
descending replays the tape in exact reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()) if self.data.size == 1 else self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic kept deliberately narrow: same-shape operands or scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(grad)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    ``params`` (optional) are leaves that must end up with a gradient array even
    if the loss does not depend on them; they get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data.reshape(-1)[0]}")
    if params is not None:
        for p in params:
            if p.grad is None:
                p.zero_grad()
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = (0 if loss.grad is None else loss.grad) + np.ones_like(loss.data)
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"gradient shape {pg.shape} does not match tensor shape {parent.data.shape}"
                )
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = float(b)
        return make_node(a.data + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(
        np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=g.dtype),)
    )


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return make_node(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_node(out, (x,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors])
    return make_node(data, tuple(tensors), lambda g: tuple(g[i] for i in range(len(tensors))))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def channel_mix(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution: ``w`` [C_out, C_in] applied to x [B, C_in, T, N]."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel_mix shapes incompatible: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)

    def _bw(g):
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        return gx, gw

    return make_node(np.ascontiguousarray(out), (x, w), _bw)


# ---------------------------------------------------------------- normalization


class BatchNormState:
    """Learned affine plus running statistics, all shaped [C, N]."""

    def __init__(self, channels: int, joints: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.weight = Tensor(np.ones((channels, joints), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros((channels, joints), dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros((channels, joints), dtype=dtype)
        self.running_var = np.ones((channels, joints), dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def shape(self) -> tuple[int, int]:
        return self.running_mean.shape


def batch_norm(x: Tensor, state: BatchNormState, training: bool = True) -> Tensor:
    """Normalize x [B, C, T, N] per (channel, joint) over batch and time."""
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [B, C, T, N], got {x.shape}")
    b, c, t, n = x.shape
    if (c, n) != state.shape:
        raise ShapeError(f"batch_norm state is {state.shape}, input has (C, N) = {(c, n)}")
    if b == 0 or t == 0:
        raise ShapeError("batch_norm needs a non-empty batch and time extent")
    gamma, beta = state.weight, state.bias
    gd = gamma.data[None, :, None, :]
    xd = x.data
    if training:
        m = b * t
        mu = xd.mean(axis=(0, 2), keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv
        mom = state.momentum
        unbiased = var[0, :, 0, :] * (m / (m - 1) if m > 1 else 1.0)
        state.running_mean = (1 - mom) * state.running_mean + mom * mu[0, :, 0, :]
        state.running_var = (1 - mom) * state.running_var + mom * unbiased
    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)[None, :, None, :]
        xhat = (xd - state.running_mean[None, :, None, :]) * inv
    out = (xhat * gd + beta.data[None, :, None, :]).astype(xd.dtype, copy=False)

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gd
        if training:
            m = b * t
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx.astype(xd.dtype, copy=False), ggamma, gbeta

    return make_node(out, (x, gamma, beta), _bw)


# ---------------------------------------------------------------- temporal ops


def temporal_output_length(t: int, stride: int) -> int:
    return -(-t // stride)


def temporal_conv(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation along time, independently per joint.

    x [B, C_in, T, N], w [C_out, C_in, G] with G odd -> [B, C_out, ceil(T/stride), N].
    """
    if x.ndim != 4 or w.ndim != 3:
        raise ShapeError(f"temporal_conv expects x [B,C,T,N] and w [O,C,G]; got {x.shape}, {w.shape}")
    b, c, t, n = x.shape
    c_out, c_in, k = w.shape
    if c_in != c:
        raise ShapeError(f"temporal_conv: input has {c} channels, kernel expects {c_in}")
    if k % 2 == 0:
        raise ValueError(f"temporal kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    t_out = temporal_output_length(t, stride)
    if t < 1 or t_out < 1:
        raise ShapeError("temporal_conv needs T >= 1")
    pad = k // 2
    xd, wd = x.data, w.data
    xp = np.zeros((b, c, t + 2 * pad, n), dtype=xd.dtype)
    xp[:, :, pad:pad + t] = xd
    # windows: [B, C, T, N, G] -> strided frames
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
    out = np.tensordot(win, wd, axes=([1, 4], [1, 2])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g, wd, axes=([1], [0]))  # [B, T', N, C, G]
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for d in range(k):
            gxp[:, :, d:d + span:stride] += gwin[..., d].transpose(0, 3, 1, 2)
        grads = [gxp[:, :, pad:pad + t], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_node(out, parents, _bw)


def temporal_avg_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean over time windows; a short trailing window averages what it has."""
    if x.ndim != 4:
        raise ShapeError(f"temporal_avg_pool expects [B,C,T,N], got {x.shape}")
    if window == 1:
        return x
    b, c, t, n = x.shape
    t_out = temporal_output_length(t, window)
    full = t // window
    xd = x.data
    out = np.empty((b, c, t_out, n), dtype=xd.dtype)
    out[:, :, :full] = xd[:, :, :full * window].reshape(b, c, full, window, n).mean(axis=3)
    rem = t - full * window
    if rem:
        out[:, :, full] = xd[:, :, full * window:].mean(axis=2)

    def _bw(g):
        gx = np.empty_like(xd)
        gx[:, :, :full * window] = np.repeat(g[:, :, :full] / window, window, axis=2)
        if rem:
            gx[:, :, full * window:] = g[:, :, full:full + 1] / rem
        return (gx,)

    return make_node(out, (x,), _bw)


def global_max_pool(x: Tensor) -> Tensor:
    """Max over (T, N) per (batch, channel); ties resolve to the first position."""
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects [B,C,T,N], got {x.shape}")
    b, c, t, n = x.shape
    if t < 1 or n < 1:
        raise ShapeError("global_max_pool needs T >= 1 and N >= 1")
    flat = x.data.reshape(b, c, t * n)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def _bw(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(b, c, t, n),)

    return make_node(out, (x,), _bw)
