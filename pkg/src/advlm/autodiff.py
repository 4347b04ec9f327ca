"""Reverse-mode automatic differentiation on numpy arrays.

Operations run inside an active :class:`Graph` are appended to its tape when
at least one input requires a gradient. :func:`backward` walks that tape in
reverse and accumulates into the ``grad`` buffers of leaf tensors.

Binary operations require equal shapes. The only implicit broadcast is a
Python scalar in :func:`scale`; bias addition goes through :func:`add_bias`.
"""
from __future__ import annotations

import contextlib
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DisconnectedLoss,
    InvalidRate,
    NotScalar,
    ShapeMismatch,
    TargetOutOfRange,
)

_PRECISIONS = {64: np.float64, 32: np.float32}
_default_dtype = np.float64
_local = threading.local()


def set_precision(bits: int) -> None:
    global _default_dtype
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _PRECISIONS[bits]


def get_dtype():
    return _default_dtype


def dtype_for(bits: int):
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    return _PRECISIONS[bits]


@contextlib.contextmanager
def precision(bits: int):
    prev = _default_dtype
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(64 if prev is np.float64 else 32)


class Tensor:
    """Dense array with an optional gradient accumulator.

    ``node_id`` is the index of the tape entry that produced the tensor, or
    ``None`` for leaves and constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    outputs: tuple[Tensor, ...]
    backward: Callable


def site_rng(seed: int, step: int, site: str) -> np.random.Generator:
    """Independent generator for one use site of one step.

    Streams for different sites never overlap, so adding a consumer of
    randomness (e.g. a generator's dropout) leaves every other stream intact.
    """
    key = (int(step), zlib.crc32(site.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


class Graph:
    """Tape of executed operations plus a seedable, per-site RNG.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded on it.
    """

    def __init__(self, seed: int = 0, step: int = 0):
        self.nodes: list[Node] = []
        self.seed = seed
        self.step = step
        self._paused = 0

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def recording(self) -> bool:
        return self._paused == 0

    @contextlib.contextmanager
    def paused(self):
        """Run ops without recording them: results are constants."""
        self._paused += 1
        try:
            yield
        finally:
            self._paused -= 1

    def rng(self, site: str) -> np.random.Generator:
        return site_rng(self.seed, self.step, site)

    def contains(self, t: Tensor) -> bool:
        nid = t.node_id
        return nid is not None and nid < len(self.nodes) and any(o is t for o in self.nodes[nid].outputs)


def _stack() -> list[Graph]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_graph() -> Graph | None:
    st = _stack()
    return st[-1] if st else None


@contextlib.contextmanager
def no_grad():
    g = current_graph()
    if g is None:
        yield
        return
    with g.paused():
        yield


def _emit(op: str, inputs: Sequence[Tensor], outs: Sequence[np.ndarray], backward: Callable):
    tensors = tuple(Tensor(o) for o in outs)
    g = current_graph()
    if g is not None and g.recording and any(t.requires_grad for t in inputs):
        nid = len(g.nodes)
        for t in tensors:
            t.requires_grad = True
            t.node_id = nid
        g.nodes.append(Node(op, tuple(inputs), tensors, backward))
    return tensors


def _one(op, inputs, out, backward) -> Tensor:
    return _emit(op, inputs, (out,), backward)[0]


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every differentiable leaf's ``grad``.

    Grads accumulate; callers zero them between steps.
    """
    graph = graph if graph is not None else current_graph()
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
    if graph is None or not graph.contains(loss):
        raise DisconnectedLoss("loss was not produced on this graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes[: loss.node_id + 1]):
        gouts = [grads.pop(id(o), None) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        if len(gouts) == 1:
            gins = node.backward(gouts[0])
        else:
            gins = node.backward(*[np.zeros_like(o.data) if g is None else g for g, o in zip(gouts, node.outputs)])
        for t, gi in zip(node.inputs, gins):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is None:
                t.grad = np.array(gi, dtype=t.data.dtype) if t.grad is None else t.grad + gi
            else:
                k = id(t)
                grads[k] = gi if k not in grads else grads[k] + gi


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    return _one("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    return _one("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)

    def bw(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return _one("mul", (a, b), a.data * b.data, bw)


def neg(a: Tensor) -> Tensor:
    return _one("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _one("scale", (a,), a.data * c, lambda g: (g * c,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _one("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _one("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    # Subgradient at exactly 0 is 0.
    active = a.data > 0
    return _one("relu", (a,), np.where(active, a.data, 0.0).astype(a.dtype), lambda g: (g * active,))


# -- shape and reduction -----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner extents {a.shape[1]} and {b.shape[0]} differ")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None)

    return _one("matmul", (a, b), a.data @ b.data, bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[m, n] + b[n]`` row-wise."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _one("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _one("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    return _one("transpose", (a,), a.data.T, lambda g: (g.T,))


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _one("columns", (a,), a.data[..., start:stop], bw)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack: shapes differ: {sorted(shapes)}")
    tensors = tuple(tensors)
    return _one("stack", tensors, np.stack([t.data for t in tensors]), lambda g: tuple(g))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _one("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _one("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.broadcast_to(g / n, shape),))


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    vocab, dim = weight.shape

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, dim))
        return (gw,)

    return _one("embedding", (weight,), weight.data[ids], bw)


# -- softmax, losses, norms ----------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    p = np.exp(_log_softmax(logits.data))

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _one("softmax", (logits,), p, bw)


def softmax_cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under row-wise softmax.

    ``reduction`` is ``"mean"`` (default), ``"sum"`` or ``"none"`` (per row).
    """
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross-entropy: logits {logits.shape} vs targets {targets.shape}")
    n, vocab = logits.shape
    if n and (targets.min() < 0 or targets.max() >= vocab):
        raise TargetOutOfRange(f"target ids must lie in [0, {vocab})")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    nll = -logp[rows, targets]

    def local_grad():
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return d

    if reduction == "none":
        return _one("softmax_xent", (logits,), nll, lambda g: (local_grad() * g[:, None],))
    if reduction == "sum":
        return _one("softmax_xent", (logits,), np.asarray(nll.sum()), lambda g: (local_grad() * g,))
    if reduction == "mean":
        return _one("softmax_xent", (logits,), np.asarray(nll.mean()), lambda g: (local_grad() * (g / n),))
    raise ValueError(f"unknown reduction {reduction!r}")


def l2_norm(v: Tensor) -> Tensor:
    """Euclidean norm of all entries; the gradient at the zero vector is 0."""
    norm = np.sqrt((v.data * v.data).sum())

    def bw(g):
        if norm == 0:
            return (np.zeros_like(v.data),)
        return (v.data * (g / norm),)

    return _one("l2_norm", (v,), np.asarray(norm), bw)


def row_norms(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis, shape ``x.shape[:-1]``."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1))

    def bw(g):
        safe = np.where(norms > 0, norms, 1.0)
        coef = np.where(norms > 0, g / safe, 0.0)
        return (x.data * coef[..., None],)

    return _one("row_norms", (x,), norms, bw)


# -- dropout -----------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=None) -> np.ndarray:
    """Keep-mask of 0/1 entries; each entry kept with probability ``1 - rate``."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    dtype = dtype or _default_dtype
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    return (rng.random(shape) >= rate).astype(dtype)


def dropout(t: Tensor, rate: float, rng: np.random.Generator | None = None, mask: np.ndarray | None = None):
    """Inverted dropout. Returns ``(output, keep_mask)``.

    Passing a previously returned ``mask`` replays it exactly.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {rate}")
    if mask is None:
        if rng is None and rate > 0:
            raise ValueError("dropout needs an rng or an explicit mask")
        mask = dropout_mask(t.shape, rate, rng, t.dtype)
    elif mask.shape != t.shape:
        raise ShapeMismatch(f"dropout mask {mask.shape} does not match {t.shape}")
    if rate == 0.0:
        return t, mask
    scaled = (mask / (1.0 - rate)).astype(t.dtype)
    return mul(t, Tensor(scaled)), mask


def mul_const(t: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, fixed scalings)."""
    arr = np.asarray(arr, dtype=t.dtype)
    if arr.shape != t.shape:
        raise ShapeMismatch(f"mul_const: {arr.shape} vs {t.shape}")
    return _one("mul_const", (t,), t.data * arr, lambda g: (g * arr,))


# -- LSTM kernels ------------------------------------------------------------

def _cell_forward(x, h, c, w_ih, w_hh, b):
    z = x @ w_ih.T + h @ w_hh.T + b
    n = h.shape[1]
    i = _sigmoid(z[:, :n])
    f = _sigmoid(z[:, n : 2 * n])
    g = np.tanh(z[:, 2 * n : 3 * n])
    o = _sigmoid(z[:, 3 * n :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def _cell_backward(dh, dc, c_prev, cache):
    """Returns (d gate pre-activations, d previous cell state)."""
    i, f, g, o, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)],
        axis=1,
    )
    return dz, dc * f


def _check_lstm(x_dim, h, c, w_ih, w_hh, b):
    n = h.shape[-1]
    if w_ih.shape != (4 * n, x_dim) or w_hh.shape != (4 * n, n) or b.shape != (4 * n,) or c.shape != h.shape:
        raise ShapeMismatch(
            f"lstm: input dim {x_dim}, state {h.shape}/{c.shape}, "
            f"weights {w_ih.shape}, {w_hh.shape}, bias {b.shape}"
        )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """One LSTM step, gate order (input, forget, cell, output). Returns ``(h', c')``."""
    x, h, c = _t(x), _t(h), _t(c)
    if x.data.ndim != 2 or h.data.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ShapeMismatch(f"lstm_cell: input {x.shape} vs state {h.shape}")
    _check_lstm(x.shape[1], h, c, w_ih, w_hh, b)
    h_new, c_new, cache = _cell_forward(x.data, h.data, c.data, w_ih.data, w_hh.data, b.data)

    def bw(dh, dc):
        dz, dc_prev = _cell_backward(dh, dc, c.data, cache)
        return (
            dz @ w_ih.data if x.requires_grad else None,
            dz @ w_hh.data if h.requires_grad else None,
            dc_prev,
            dz.T @ x.data if w_ih.requires_grad else None,
            dz.T @ h.data if w_hh.requires_grad else None,
            dz.sum(axis=0),
        )

    return _emit("lstm_cell", (x, h, c, w_ih, w_hh, b), (h_new, c_new), bw)


def lstm_layer(xs: Tensor, h0, c0, w_ih: Tensor, w_hh: Tensor, b: Tensor):
    """Run an LSTM over ``xs[T, batch, in]``. Returns ``(hs[T, batch, hidden], h_T, c_T)``.

    The forward pass is step-for-step the same arithmetic as chained
    :func:`lstm_cell` calls, so both agree bitwise.
    """
    h0, c0 = _t(h0), _t(c0)
    if xs.data.ndim != 3 or h0.data.ndim != 2 or xs.shape[1] != h0.shape[0]:
        raise ShapeMismatch(f"lstm_layer: inputs {xs.shape} vs state {h0.shape}")
    _check_lstm(xs.shape[2], h0, c0, w_ih, w_hh, b)
    steps, batch, _ = xs.shape
    n = h0.shape[1]
    hs = np.empty((steps, batch, n), dtype=xs.dtype)
    cs = np.empty((steps, batch, n), dtype=xs.dtype)
    caches = []
    h, c = h0.data, c0.data
    for t in range(steps):
        h, c, cache = _cell_forward(xs.data[t], h, c, w_ih.data, w_hh.data, b.data)
        hs[t], cs[t] = h, c
        caches.append(cache)

    def bw(dhs, dh_last, dc_last):
        dz_all = np.empty((steps, batch, 4 * n), dtype=xs.dtype)
        dh, dc = dh_last, dc_last
        w_hh_d = w_hh.data
        for t in range(steps - 1, -1, -1):
            c_prev = cs[t - 1] if t else c0.data
            dz, dc = _cell_backward(dhs[t] + dh, dc, c_prev, caches[t])
            dz_all[t] = dz
            dh = dz @ w_hh_d
        flat = dz_all.reshape(steps * batch, 4 * n)
        h_prev = np.concatenate([h0.data[None], hs[:-1]]).reshape(steps * batch, n)
        return (
            (flat @ w_ih.data).reshape(xs.shape) if xs.requires_grad else None,
            dh,
            dc,
            flat.T @ xs.data.reshape(steps * batch, -1) if w_ih.requires_grad else None,
            flat.T @ h_prev if w_hh.requires_grad else None,
            flat.sum(axis=0),
        )

    return _emit("lstm_layer", (xs, h0, c0, w_ih, w_hh, b), (hs, hs[-1].copy(), cs[-1].copy()), bw)
