"""Reverse-mode differentiation over a small set of vector-level primitives.

Operations are recorded on the active :class:`Tape` (entered with ``with``).
Inputs may be :class:`Node` objects, :class:`ParameterBlock` leaves fetched with
:func:`param`, or plain numpy arrays.  When no operand is a node the operation
degrades to plain numpy, which keeps frozen-model evaluation cheap.
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "inrslam_active_tape", default=None
)


class DivergedError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


class ParameterBlock:
    """A named array of learnable values together with its gradient."""

    def __init__(self, name: str, values, learnable: bool = True):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.learnable = learnable

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "ParameterBlock":
        out = ParameterBlock(self.name, self.values.copy(), self.learnable)
        out.grad = self.grad.copy()
        return out

    def __repr__(self) -> str:
        return f"ParameterBlock({self.name!r}, shape={self.values.shape}, learnable={self.learnable})"


class Node:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: "Tape", id: int):
        self.value = value
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive operations.

    ``watch`` restricts which parameter blocks become differentiable leaves;
    any other block fetched through :func:`param` is treated as a constant.
    ``None`` watches every learnable block.
    """

    def __init__(self, watch: Iterable[ParameterBlock] | None = None):
        self.ops: list[tuple[int, tuple, Callable]] = []
        self.leaves: dict[int, tuple[ParameterBlock, Node]] = {}
        self._watch = None if watch is None else {id(b) for b in watch}
        self._next = 0
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _new(self, value) -> Node:
        node = Node(value, self, self._next)
        self._next += 1
        return node

    def watches(self, block: ParameterBlock) -> bool:
        if not block.learnable:
            return False
        return self._watch is None or id(block) in self._watch

    def param(self, block: ParameterBlock):
        if not self.watches(block):
            return block.values
        hit = self.leaves.get(id(block))
        if hit is None:
            hit = (block, self._new(block.values))
            self.leaves[id(block)] = hit
        return hit[1]

    def record(self, value, inputs: Sequence, vjp: Callable) -> Node:
        out = self._new(np.asarray(value, dtype=np.float64))
        in_ids = tuple(x.id if isinstance(x, Node) else None for x in inputs)
        self.ops.append((out.id, in_ids, vjp))
        return out

    def clear(self) -> None:
        self.ops.clear()
        self.leaves.clear()

    def __len__(self) -> int:
        return len(self.ops)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def param(block: ParameterBlock):
    """Fetch a block's values as a leaf on the active tape (or a constant)."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return block.values
    return tape.param(block)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(inputs) -> Tape | None:
    for x in inputs:
        if isinstance(x, Node):
            return x.tape
    return None


def custom(out_value, inputs: Sequence, vjp: Callable):
    """Record a primitive with a user supplied vector-Jacobian product.

    ``vjp(g)`` returns one gradient (or ``None``) per entry of ``inputs``.
    Returns a plain array when no input is a node.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return out_value
    return tape.record(out_value, inputs, vjp)


def backward(tape: Tape, loss: Node) -> None:
    """Reverse accumulation from a scalar ``loss``; writes block gradients.

    Gradients are overwritten (not accumulated) so repeated calls on the same
    tape give identical results.  Watched blocks unreachable from the loss get
    exactly zero.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss must be a node recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for out_id, in_ids, vjp in reversed(tape.ops):
        g = adj.pop(out_id, None)
        if g is None:
            continue
        grads = vjp(g)
        for i, gi in zip(in_ids, grads):
            if i is None or gi is None:
                continue
            prev = adj.get(i)
            adj[i] = gi if prev is None else prev + gi
    for block, node in tape.leaves.values():
        g = adj.get(node.id)
        if g is None:
            block.grad[...] = 0.0
        else:
            block.grad[...] = np.broadcast_to(g, block.values.shape)


def grad_of(tape: Tape, loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to arbitrary recorded nodes."""
    want = {n.id for n in wrt}
    adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    kept: dict[int, np.ndarray] = {}
    for out_id, in_ids, vjp in reversed(tape.ops):
        g = adj.pop(out_id, None)
        if g is None:
            continue
        if out_id in want:
            kept[out_id] = g
        for i, gi in zip(in_ids, vjp(g)):
            if i is None or gi is None:
                continue
            prev = adj.get(i)
            adj[i] = gi if prev is None else prev + gi
    kept.update({k: v for k, v in adj.items() if k in want})
    return [kept.get(n.id, np.zeros_like(n.value)) for n in wrt]


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    av, bv = value(a), value(b)
    return custom(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    return custom(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    return custom(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return custom(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def neg(a):
    return custom(-value(a), (a,), lambda g: (-g,))


def square(a):
    av = value(a)
    return custom(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    out = np.exp(value(a))
    return custom(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return custom(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return custom(out, (a,), lambda g: (0.5 * g / out,))


def sin(a):
    av = value(a)
    return custom(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    return custom(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.asarray(value(a), dtype=np.float64))
    return custom(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    av = value(a)
    out = np.maximum(av, 0.0)
    return custom(out, (a,), lambda g: (np.where(out > 0, g, 0.0),))


def clip(a, lo: float, hi: float):
    av = value(a)
    inside = (av >= lo) & (av <= hi)
    return custom(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a, b):
    """Elementwise select with a constant boolean mask."""
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    return custom(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), av.shape),
                   _unbroadcast(np.where(mask, 0.0, g), bv.shape)),
    )


def matmul(a, b):
    av, bv = value(a), value(b)
    return custom(av @ bv, (a, b), lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g))


def linear(x, w, b):
    """``x @ w + b`` for a batch of row vectors."""
    xv, wv, bv = value(x), value(w), value(b)
    out = xv @ wv
    out += bv

    def vjp(g):
        gx = g @ wv.T if isinstance(x, Node) else None
        gw = xv.T @ g if isinstance(w, Node) else None
        gb = np.ones(len(g)) @ g if isinstance(b, Node) else None
        return gx, gw, gb

    return custom(out, (x, w, b), vjp)


def mlp(x, weights: Sequence, biases: Sequence, chunk: int = 4096):
    """Fused ReLU perceptron (identity output), evaluated in row chunks.

    Equivalent to alternating :func:`linear` and :func:`relu`; chunking keeps
    the activations cache-resident, which matters for 10^5-row batches.
    """
    xv = value(x)
    wv = [value(w) for w in weights]
    bv = [value(b) for b in biases]
    n, depth = len(xv), len(wv)
    acts = [[] for _ in range(depth)]  # post-activation outputs per layer, per chunk
    out = np.empty((n, wv[-1].shape[1]))
    for s in range(0, n, chunk):
        h = xv[s:s + chunk]
        for i in range(depth):
            h = h @ wv[i]
            h += bv[i]
            if i < depth - 1:
                np.maximum(h, 0.0, out=h)
                acts[i].append(h)
        out[s:s + chunk] = h

    def vjp(g):
        gws = [np.zeros_like(w) for w in wv]
        gbs = [np.zeros_like(b) for b in bv]
        gx = np.empty_like(xv) if isinstance(x, Node) else None
        for c, s in enumerate(range(0, n, chunk)):
            gc = g[s:s + chunk]
            for i in range(depth - 1, -1, -1):
                if isinstance(weights[i], Node):
                    inp = xv[s:s + chunk] if i == 0 else acts[i - 1][c]
                    gws[i] += inp.T @ gc
                if isinstance(biases[i], Node):
                    gbs[i] += np.ones(len(gc)) @ gc
                if i == 0 and gx is None:
                    break
                gc = gc @ wv[i].T
                if i > 0:
                    gc *= acts[i - 1][c] > 0
            if gx is not None:
                gx[s:s + chunk] = gc
        return (gx, *gws, *gbs)

    return custom(out, (x, *weights, *biases), vjp)


def sum(a, axis=None, keepdims: bool = False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return custom(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    n = value(a).size if axis is None else value(a).shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape):
    av = value(a)
    return custom(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def index(a, key):
    av = value(a)
    out = av[key]

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(None), type(Ellipsis))) for k in keys)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return custom(out, (a,), vjp)


def transpose(a):
    """Swap the last two axes."""
    return custom(np.swapaxes(value(a), -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take_rows(a, rows: np.ndarray):
    """Gather rows ``a[rows]`` along axis 0 (rows may repeat)."""
    av = value(a)
    rows = np.asarray(rows)
    out = av[rows]

    def vjp(g):
        return (scatter_rows_add(av.shape[0], rows, g),)

    return custom(out, (a,), vjp)


def scatter_rows_add(n_rows: int, rows: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Dense ``out[rows[k]] += vals[k]`` using bincount (deterministic order)."""
    vals = np.asarray(vals, dtype=np.float64)
    tail = vals.shape[1:]
    flat = vals.reshape(len(rows), -1)
    out = np.empty((n_rows, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(rows, weights=flat[:, j], minlength=n_rows)
    return out.reshape((n_rows,) + tail)


def scatter_rows(a, rows: np.ndarray, n_rows: int, fill: float = 0.0):
    """Place ``a`` at unique ``rows`` of an ``n_rows`` array filled with ``fill``."""
    av = value(a)
    out = np.full((n_rows,) + av.shape[1:], fill, dtype=np.float64)
    out[rows] = av
    return custom(out, (a,), lambda g: (g[rows],))


def concat(parts: Sequence, axis: int = -1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom(out, tuple(parts), vjp)


def cumsum(a, axis: int = -1, exclusive: bool = False):
    av = value(a)
    out = np.cumsum(av, axis=axis)
    if exclusive:
        out = out - av

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)

    return custom(out, (a,), vjp)


def cumprod_exclusive(a):
    """Along the last axis: ``out[..., i] = prod_{j<i} a[..., j]``.

    The backward pass uses a suffix recursion, so zeros in ``a`` are handled
    without division.
    """
    av = value(a)
    n = av.shape[-1]
    out = np.ones_like(av)
    if n > 1:
        out[..., 1:] = np.cumprod(av[..., :-1], axis=-1)

    def vjp(g):
        # S_j = sum_{i>j} g_i prod_{j<k<i} a_k ; d out / d a_j contracted = out_j * S_j
        s = np.zeros_like(av)
        for j in range(n - 2, -1, -1):
            s[..., j] = g[..., j + 1] + av[..., j + 1] * s[..., j + 1]
        return (out * s,)

    return custom(out, (a,), vjp)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(block: ParameterBlock, state: AdamState) -> ParameterBlock:
    """One bias-corrected Adam update in place; zeroes the gradient afterwards."""
    g = block.grad
    if not np.all(np.isfinite(g)):
        raise DivergedError(f"non-finite gradient in block {block.name!r}")
    if state.m is None:
        state.m = np.zeros_like(block.values)
        state.v = np.zeros_like(block.values)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    block.values -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    block.zero_grad()
    return block


@dataclass
class Adam:
    """Adam over several blocks with per-block learning rates and global-norm clipping."""

    blocks: list[ParameterBlock]
    lrs: list[float]
    clip_norm: float | None = 10.0
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if len(self.blocks) != len(self.lrs):
            raise ValueError("one learning rate per block")
        if not self.states:
            self.states = [AdamState(lr=lr) for lr in self.lrs]

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum([np.vdot(b.grad, b.grad) for b in self.blocks])))

    def step(self, lr_scale: float = 1.0) -> None:
        for b in self.blocks:
            if not np.all(np.isfinite(b.grad)):
                raise DivergedError(f"non-finite gradient in block {b.name!r}")
        if self.clip_norm is not None:
            norm = self.global_norm()
            if norm > self.clip_norm:
                for b in self.blocks:
                    b.grad *= self.clip_norm / norm
        for b, st, lr in zip(self.blocks, self.states, self.lrs):
            st.lr = lr * lr_scale
            adam_step(b, st)


# --------------------------------------------------------------------------
# checking
# --------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[], float],
    block: ParameterBlock,
    h: float = 1e-5,
    analytic: np.ndarray | None = None,
    indices: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |central|)``.

    ``f`` evaluates the scalar objective from the block's current values.  When
    ``analytic`` is omitted the block's stored gradient is used.  ``indices``
    selects a subset of flat coordinates (all by default).
    """
    analytic = block.grad if analytic is None else analytic
    flat = block.values.reshape(-1)
    an = np.asarray(analytic).reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        num = (fp - fm) / (2.0 * h)
        err = abs(an[i] - num) / max(1.0, abs(num))
        worst = max(worst, err)
    return worst
