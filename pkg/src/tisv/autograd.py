"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its
parent tensors and a closure mapping the output gradient to one gradient per
parent.  :func:`grad` walks the resulting DAG in reverse topological order,
so every node is visited exactly once and contributions from several
consumers of a node are summed before the node propagates further.

All arithmetic is float64.  Batched layouts are ``(B, C, T)`` for signals and
``(B, D)`` for vectors; single items ``(C, T)`` / ``(D,)`` are accepted by the
ops that the network and losses call directly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateEmbeddingError,
    InputTooShortError,
    TrainingDivergedError,
    UninitializedStatisticsError,
)

EPS_NORM = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: np.ndarray | None = None) -> dict[int, tuple[Tensor, np.ndarray]]:
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=np.float64)
    }
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def grad(root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. leaves ``wrt``; nothing is stored on the leaves."""
    leaves = _propagate(root)
    out = []
    for t in wrt:
        hit = leaves.get(id(t))
        out.append(np.zeros_like(t.data) if hit is None else hit[1].reshape(t.shape))
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not root.requires_grad:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        return
    for leaf, g in _propagate(root).values():
        g = g.reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    first = a.data <= b.data
    return _make(
        np.where(first, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)),
        "minimum",
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows (or slices along ``axis``); repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(
        out,
        tensors,
        lambda g: [np.take(g, i, axis=axis) for i in range(len(tensors))],
        "stack",
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def grad_reverse(a, scale: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-scale``."""
    a = as_tensor(a)
    s = float(scale)
    return _make(a.data.copy(), (a,), lambda g: (-s * g,), "grad_reverse")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in); ``x`` is (in,) or (B, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ConfigurationError(f"affine: bias {bias.shape} vs weight {weight.shape}")
    single = x.ndim == 1
    xd = x.data[None, :] if single else x.data
    out = xd @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g[None, :] if single else g
        gx = g2 @ weight.data
        gw = g2.T @ xd
        res = [gx[0] if single else gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if single else out, parents, bw, "affine")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ContractError("softmax input must be finite")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def l2_normalize(v, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Scale to unit L2 norm along ``axis``; raises if any norm is below ``eps``."""
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateEmbeddingError(f"cannot normalize vector with norm {float(norm.min()):.3g}")
    y = v.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (v,), bw, "l2_normalize")


def cosine(a, b, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """Exact ``a.b / (|a||b|)`` along ``axis``; never clamped."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"cosine shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na <= eps) or np.any(nb <= eps):
        raise DegenerateEmbeddingError("cosine of a zero-norm vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    c = dot / (na * nb)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - c * a.data / (na * na))
        gb = g * (a.data / (na * nb) - c * b.data / (nb * nb))
        return ga, gb

    return _make(np.squeeze(c, axis=axis), (a, b), bw, "cosine")


# ---------------------------------------------------------------------------
# convolution and batch norm


def conv_output_length(t: int, kernel: int, stride: int, padding: str = "same") -> int:
    if padding == "valid":
        return (t - kernel) // stride + 1
    return -(-t // stride)


def _same_pad(t: int, kernel: int, stride: int) -> tuple[int, int]:
    t_out = -(-t // stride)
    total = max((t_out - 1) * stride + kernel - t, 0)
    return total // 2, total - total // 2


def conv1d(x, weight, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """1-D cross-correlation.

    ``x`` is (C_in, T) or (B, C_in, T); ``weight`` is (C_out, C_in, K).  With
    ``padding="same"`` the output length is ceil(T / stride); ``"valid"`` uses
    no padding and gives floor((T - K) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if weight.ndim != 3:
        raise ConfigurationError(f"conv weight must be (C_out, C_in, K), got {weight.shape}")
    single = x.ndim == 2
    xd = x.data[None] if single else x.data
    if xd.ndim != 3 or xd.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"conv input {x.shape} incompatible with weight {weight.shape}")
    b, c, t = xd.shape
    o, _, k = weight.shape
    if t < k:
        raise InputTooShortError(f"input length {t} shorter than kernel {k}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ConfigurationError(f"conv bias {bias.shape} vs {o} output channels")
    if padding == "same":
        left, right = _same_pad(t, k, stride)
    elif padding == "valid":
        left = right = 0
    else:
        raise ConfigurationError(f"unknown padding {padding!r}")
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if left or right else xd
    t_out = (xp.shape[2] - k) // stride + 1
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :t_out]  # (B, C, T_out, K)
    cols2 = cols.transpose(0, 2, 1, 3).reshape(b * t_out, c * k)
    w2 = weight.data.reshape(o, c * k)
    out = (cols2 @ w2.T).reshape(b, t_out, o).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        if single:
            g = g[None]
        g2 = g.transpose(0, 2, 1).reshape(b * t_out, o)
        gw = (g2.T @ cols2).reshape(o, c, k)
        gcols = (g2 @ w2).reshape(b, t_out, c, k)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, left : left + t]
        res = [gx[0] if single else gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if single else out, parents, bw, "conv1d")


class BatchNormState:
    """Running per-channel statistics owned by one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False
        self.frozen = False

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if self.frozen:
            return
        if not self.initialized:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
            self.initialized = True
        else:
            m = self.momentum
            self.mean = m * self.mean + (1.0 - m) * batch_mean
            self.var = m * self.var + (1.0 - m) * batch_var


def batch_norm(x, gamma, beta, state: BatchNormState | None = None, mode: str = "train") -> Tensor:
    """Per-channel normalisation of (C, T) or (B, C, T) input.

    Train mode normalises with the biased variance over batch and time and
    folds those statistics into ``state``; infer mode uses ``state``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c_axis = x.ndim - 2
    c = x.shape[c_axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    axes = tuple(i for i in range(x.ndim) if i != c_axis)
    bshape = [1] * x.ndim
    bshape[c_axis] = c
    eps = state.eps if state is not None else BN_EPS
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if mode == "infer":
        if state is None or not state.initialized:
            raise UninitializedStatisticsError("batch norm has no running statistics yet")
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean.reshape(bshape)) * inv.reshape(bshape)
        out = g_ * xhat + b_

        def bw_infer(g):
            return (g * (g_ * inv.reshape(bshape)), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _make(out, (x, gamma, beta), bw_infer, "batch_norm")
    if mode != "train":
        raise ConfigurationError(f"unknown batch_norm mode {mode!r}")

    n = x.data.size // c
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = g_ * xhat + b_
    if state is not None:
        state.update(mu.reshape(c), var.reshape(c))

    def bw(g):
        dxhat = g * g_
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), bw, "batch_norm")


def check_finite(arrays: Iterable[np.ndarray], step: int | None = None, what: str = "gradient") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise TrainingDivergedError(f"non-finite {what}", step)
