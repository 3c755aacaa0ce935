"""Dense tensors with tape-based reverse-mode differentiation.

Every op executed while a :class:`Graph` is active is appended to that graph's
tape, including ops whose inputs are all frozen. Such nodes carry no backward
closure and hold no saved activations, but they still count as tape entries,
which is what lets :func:`backward` report how much of the tape a truncated
sweep skipped.
"""
from __future__ import annotations

import contextlib
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5

_state = threading.local()


def _graph_stack() -> list:
    if not hasattr(_state, "graphs"):
        _state.graphs = []
        _state.counters = []
    return _state.graphs


def _counters() -> list:
    _graph_stack()
    return _state.counters


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def parameter(data, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Graph:
    """Ordered tape of recorded operations.

    ``first_param_node`` is the lowest node id that consumes a trainable leaf;
    no node below it can lie on a path from a trainable parameter to the loss.
    """

    nodes: list = field(default_factory=list)
    first_param_node: Optional[int] = None
    visited: int = 0

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def op_counts(self) -> Counter:
        return Counter(n.op for n in self.nodes)

    @property
    def next_id(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on any tape (inference mode)."""
    stack = _graph_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


@contextlib.contextmanager
def count_ops():
    """Count every op executed in the block, recorded or not."""
    counter: Counter = Counter()
    _counters().append(counter)
    try:
        yield counter
    finally:
        _counters().remove(counter)


def _emit(op: str, data: np.ndarray, inputs: tuple, make_backward: Callable[[], Callable]) -> Tensor:
    for c in _counters():
        c[op] += 1
    out = Tensor(data)
    graph = current_graph()
    if graph is None:
        return out
    needs = any(t.requires_grad for t in inputs)
    node_id = graph.next_id
    if needs:
        if graph.first_param_node is None and any(t.requires_grad and t.node_id is None for t in inputs):
            graph.first_param_node = node_id
        graph.nodes.append(Node(node_id, op, inputs, make_backward()))
    else:
        graph.nodes.append(Node(node_id, op, (), None))
    out.requires_grad = needs
    out.node_id = node_id
    out.graph = graph
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda: lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def make():
        return lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit("mul", ad * bd, (a, b), make)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.maximum(x.data, 0), (x,),
                 lambda: lambda g: (g * mask,))


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    z = xd * _SQRT1_2
    if z.dtype.itemsize > 8:  # scipy's erf has no extended-precision loop
        z = z.astype(np.float64)
    cdf = (0.5 * (1.0 + erf(z))).astype(x.dtype)

    def make():
        def backward(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)
        return backward

    return _emit("gelu", xd * cdf, (x,), make)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda: lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda: lambda g: (g / xd,))


# linear algebra --------------------------------------------------------------

def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.ndim > 2 and w.ndim == 2:
        return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))
    return x @ w


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching/broadcast rules for rank > 2."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions of {list(a.shape)} and {list(b.shape)} disagree")
    ad, bd = a.data, b.data

    def make():
        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(_mm(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if b.requires_grad:
                if ad.ndim == 1:
                    gb = np.outer(ad, g)
                elif ad.ndim > 2 and bd.ndim == 2:
                    # fold leading dims so the weight grad is one GEMM
                    gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb
        return backward

    return _emit("matmul", _mm(ad, bd), (a, b), make)


# shape ops -----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda: lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda: lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.data.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def index(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def make():
        def backward(g):
            out = np.zeros(src_shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)
        return backward

    return _emit("index", x.data[idx], (x,), make)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def make():
        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
            return (out,)
        return backward

    return _emit("embedding", table.data[ids], (table,), make)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def make():
        return lambda g: tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), xs, make)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)

    def make():
        def backward(g):
            return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
        return backward

    return _emit("stack", np.stack([x.data for x in xs], axis=axis), xs, make)


# reductions ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def make():
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)
        return backward

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), make)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# normalisation / probability -----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax received non-finite input")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def make():
        return lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), make)


def softmax_masked(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with ``mask == False`` get exactly zero mass."""
    fill = np.finfo(x.dtype).min
    shifted = np.where(mask, x.data, fill)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted - m), 0).astype(x.dtype)
    out = e / e.sum(axis=axis, keepdims=True)

    def make():
        return lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), make)


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    d = x.shape[-1]
    for p, label in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {label} shape {list(p.shape)} does not match last axis {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    out = out.astype(x.dtype, copy=False)
    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def make():
        def backward(g):
            gx = gg = gb = None
            lead = tuple(range(g.ndim - 1))
            if gain is not None and gain.requires_grad:
                gg = (g * xhat).sum(axis=lead)
            if bias is not None and bias.requires_grad:
                gb = g.sum(axis=lead)
            if x.requires_grad:
                gh = g * gain.data if gain is not None else g
                gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                             - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            grads = [gx]
            if gain is not None:
                grads.append(gg)
            if bias is not None:
                grads.append(gb)
            return tuple(grads)
        return backward

    return _emit("layer_norm", out, inputs, make)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over rows of ``logits`` against integer labels."""
    labels = np.asarray(labels)
    z = logits.data
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def make():
        def backward(g):
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            return (p * (g / z.shape[0]),)
        return backward

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), make)


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, _as_tensor(target, pred.dtype))
    return mean(mul(diff, diff))


def dropout(x: Tensor, rate: float, seed: int, counter: int = 0, training: bool = True) -> Tensor:
    """Inverted dropout with a counter-based (Philox) mask; identity when not training."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    gen = np.random.Generator(np.random.Philox(key=seed, counter=counter))
    keep = (gen.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# backward -------------------------------------------------------------------------------

def backward(loss: Tensor, stop_below: int | None = None) -> int:
    """Reverse sweep from ``loss``; returns the number of tape nodes visited.

    Nodes with id < ``stop_below`` are never visited. Gradients land on leaf
    tensors with ``requires_grad`` (accumulated into ``.grad``).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss.graph is None or loss.node_id is None:
        raise ContractError("loss was not recorded on a graph")
    graph = loss.graph
    floor = 0 if stop_below is None else max(0, stop_below)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
    visited = 0
    for nid in range(loss.node_id, floor - 1, -1):
        node = graph.nodes[nid]
        visited += 1
        g = grads.pop(nid, None)
        if g is None or node.backward_fn is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is None or t.graph is not graph:
                if gi.shape != t.shape:
                    gi = gi.reshape(t.shape)
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            elif t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
    graph.visited = visited
    return visited


# numerical oracle ----------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
                      stencil: int = 2) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is a zero-argument closure that builds a scalar from ``params``. The
    analytic gradient is taken at the parameters' own precision; the numeric
    side re-evaluates ``f`` with the parameters promoted to ``np.longdouble``
    (80-bit extended on x86) and differences in that precision, so oracle
    rounding stays well below 64-bit analytic error on small coordinates.
    ``stencil=4`` switches to the five-point central difference, whose O(h^4)
    truncation error allows larger steps and so less rounding noise.
    """
    if stencil not in (2, 4):
        raise ContractError(f"stencil must be 2 or 4, got {stencil}")
    params = list(params)
    for p in params:
        p.grad = None
    with Graph():
        loss = f()
        backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    originals = [p.data for p in params]
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(np.longdouble)
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]

                def at(offset):
                    flat[i] = keep + offset
                    with no_grad():
                        return np.longdouble(f().data.reshape(()))

                if stencil == 2:
                    num = (at(step) - at(-step)) / (2.0 * step)
                else:
                    num = (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step)
                flat[i] = keep
                num = float(num)
                denom = max(abs(af[i]), abs(num), 1e-8)
                worst = max(worst, abs(af[i] - num) / denom)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
    return worst
