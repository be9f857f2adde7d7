"""Dense-tensor kernel with reverse-mode gradients.

Tensors wrap row-major numpy arrays (float32 or float64).  Every operation
is a pure function of its inputs; when gradients are enabled and an input
requires them, the op registers a vector-Jacobian closure on the output,
forming a dynamic tape that `backward` walks in reverse topological order.

Design notes:
  - one dtype per graph: mixing float32 and float64 operands is an error,
    which keeps "32-bit for speed, 64-bit for verification" honest;
  - `no_grad()` disables tape construction entirely (decode/eval paths);
  - gradient buffers may alias each other mid-backward; `_accum` copies on
    first write unless the producing op guarantees a fresh array.
"""

from __future__ import annotations

import contextlib
from typing import Iterable

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _mT(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- tape plumbing ------------------------------------------------------
    def _register(self, parents: tuple["Tensor", ...], vjp) -> None:
        self.requires_grad = True
        self._parents = parents
        self._vjp = vjp

    def _accum(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add `g` into this tensor's gradient buffer.

        `fresh=True` promises `g` is newly allocated and aliases nothing,
        letting us adopt it without a defensive copy.
        """
        if self.grad is None:
            self.grad = g if fresh else g.copy()
        else:
            np.add(self.grad, g, out=self.grad)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable tensor; grad buffer always allocated."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def _lift(v, dtype) -> Tensor:
    if isinstance(v, Tensor):
        return v
    return Tensor(np.asarray(v, dtype=dtype))


def _check_dtypes(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"mixed tensor dtypes in one op: {sorted(map(str, dtypes))}")


def _track(*parents: Tensor) -> bool:
    return _grad_enabled and any(p.requires_grad for p in parents)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    out = Tensor(a.data + b.data)
    if _track(a, b):
        def vjp(g):
            if a.requires_grad:
                a._accum(unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(unbroadcast(g, b.shape))
        out._register((a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    out = Tensor(a.data - b.data)
    if _track(a, b):
        def vjp(g):
            if a.requires_grad:
                a._accum(unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(unbroadcast(-g, b.shape), fresh=True)
        out._register((a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    out = Tensor(a.data * b.data)
    if _track(a, b):
        def vjp(g):
            if a.requires_grad:
                a._accum(unbroadcast(g * b.data, a.shape), fresh=True)
            if b.requires_grad:
                b._accum(unbroadcast(g * a.data, b.shape), fresh=True)
        out._register((a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    out = Tensor(a.data / b.data)
    if _track(a, b):
        def vjp(g):
            if a.requires_grad:
                a._accum(unbroadcast(g / b.data, a.shape), fresh=True)
            if b.requires_grad:
                b._accum(unbroadcast(-g * out.data / b.data, b.shape), fresh=True)
        out._register((a, b), vjp)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a ** c for a constant exponent."""
    exponent = float(exponent)
    out = Tensor(a.data ** exponent)
    if _track(a):
        def vjp(g):
            a._accum(g * exponent * a.data ** (exponent - 1.0), fresh=True)
        out._register((a,), vjp)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    if _track(a):
        def vjp(g):
            a._accum(g * out.data, fresh=True)
        out._register((a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    if _track(a):
        def vjp(g):
            a._accum(g / a.data, fresh=True)
        out._register((a,), vjp)
    return out


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    if _track(a):
        def vjp(g):
            a._accum(g / (2.0 * out.data), fresh=True)
        out._register((a,), vjp)
    return out


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient flows only where a > floor."""
    floor = float(floor)
    out = Tensor(np.maximum(a.data, floor))
    if _track(a):
        mask = a.data > floor
        def vjp(g):
            a._accum(g * mask, fresh=True)
        out._register((a,), vjp)
    return out


def sigmoid(a: Tensor) -> Tensor:
    # stable form: exp(-|x|) never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(y.astype(x.dtype, copy=False))
    if _track(a):
        def vjp(g):
            a._accum(g * out.data * (1.0 - out.data), fresh=True)
        out._register((a,), vjp)
    return out


def silu(a: Tensor) -> Tensor:
    s = sigmoid(a)
    return mul(a, s)


def elu1p(a: Tensor) -> Tensor:
    """elu(x) + 1: x+1 for x>0, exp(x) for x<=0. Strictly positive."""
    x = a.data
    pos = x > 0
    y = np.where(pos, x + 1.0, np.exp(np.minimum(x, 0.0)))
    out = Tensor(y.astype(x.dtype, copy=False))
    if _track(a):
        dydx = np.where(pos, 1.0, y).astype(x.dtype, copy=False)
        def vjp(g):
            a._accum(g * dydx, fresh=True)
        out._register((a,), vjp)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))
    if _track(a):
        orig = a.shape
        def vjp(g):
            a._accum(g.reshape(orig))
        out._register((a,), vjp)
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    if _track(a):
        inv = None if axes is None else np.argsort(axes)
        def vjp(g):
            a._accum(np.transpose(g, inv))
        out._register((a,), vjp)
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])
    if _track(a):
        def vjp(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf, fresh=True)
        out._register((a,), vjp)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [t for t in tensors]
    _check_dtypes(*ts)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    if _track(*ts):
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        def vjp(g):
            pieces = np.split(g, splits, axis=axis)
            for t, piece in zip(ts, pieces):
                if t.requires_grad:
                    t._accum(piece)
        out._register(tuple(ts), vjp)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    if _track(a):
        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape))
        out._register((a,), vjp)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a, None)
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if _track(a, b):
        def vjp(g):
            if a.requires_grad:
                a._accum(unbroadcast(g @ _mT(b.data), a.shape), fresh=True)
            if b.requires_grad:
                b._accum(unbroadcast(_mT(a.data) @ g, b.shape), fresh=True)
        out._register((a, b), vjp)
    return out


# ---------------------------------------------------------------------------
# neural-net primitives
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: table[ids]. ids is a plain integer array."""
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])
    if _track(table):
        def vjp(g):
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accum(buf, fresh=True)
        out._register((table,), vjp)
    return out


def _causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_rows(x: Tensor, causal: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    `mask` is a broadcastable boolean array, True = position participates.
    `causal=True` builds a lower-triangular mask over the last two dims.
    Masked positions are exactly 0 in the output.
    """
    d = x.data
    if causal:
        if mask is not None:
            raise ShapeError("pass either causal=True or an explicit mask, not both")
        mask = _causal_mask(d.shape[-1]) if d.shape[-2] == d.shape[-1] else None
        if mask is None:
            raise ShapeError(f"causal softmax requires square last two dims, got {d.shape}")
    if mask is None:
        m = d.max(axis=-1, keepdims=True)
        e = np.exp(d - m)
    else:
        neg = np.finfo(d.dtype).min
        m = np.max(np.where(mask, d, neg), axis=-1, keepdims=True)
        e = np.where(mask, np.exp(d - m), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y.astype(d.dtype, copy=False))
    if _track(x):
        def vjp(g):
            dot = (g * out.data).sum(axis=-1, keepdims=True)
            x._accum((g - dot) * out.data, fresh=True)
        out._register((x,), vjp)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of integer targets under `logits` [N, V].

    `weights` (optional, [N]) reweights samples; the loss is normalized by
    the total weight so masked fine-tuning keeps a comparable scale.
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {z.shape}")
    targets = np.asarray(targets).reshape(-1)
    n = z.shape[0]
    if targets.shape[0] != n:
        raise ShapeError(f"{n} logit rows vs {targets.shape[0]} targets")
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=z.dtype)
    else:
        weights = np.asarray(weights, dtype=z.dtype).reshape(-1)
        total = weights.sum()
        if total <= 0:
            raise ShapeError("cross_entropy weights sum to zero")
        w = weights / total
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(se)).reshape(-1)
    picked = z[np.arange(n), targets]
    loss = float(((lse - picked) * w).sum())
    out = Tensor(np.asarray(loss, dtype=z.dtype))
    if _track(logits):
        def vjp(g):
            p = e / se
            p[np.arange(n), targets] -= 1.0
            logits._accum((float(g) * w[:, None]) * p, fresh=True)
        out._register((logits,), vjp)
    return out


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """x * rsqrt(mean(x^2) + eps) * scale over the last axis."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), scale)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Fills `.grad` on every reachable tensor that requires gradients;
    parameters used several times accumulate.  The tape is released
    afterwards so graphs do not leak across steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("backward called on a non-finite loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            if not isinstance(node, Parameter) and node is not loss:
                node.grad = None
