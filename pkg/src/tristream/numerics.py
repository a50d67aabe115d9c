"""Dense tensors with reverse-mode automatic differentiation on numpy.

Covers exactly the op set the model needs: matmul, elementwise arithmetic,
softmax/log-softmax, RMS normalization, embedding lookup, masked attention,
cross-entropy, plus an `op_node` hook for custom ops (the CTC loss plugs in
through it). Default precision is float64; float32 is opt-in for speed.
Graphs are built eagerly and consumed by a single backward() pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, GraphError, NumericError, ShapeError

_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported default dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense array plus optional gradient and graph bookkeeping.

    `data` is always a numpy array; `grad`, when populated, has the same
    shape. Tensors produced by ops carry a backward closure and parent
    references; leaves carry neither. Treat `data` as immutable once the
    tensor is part of a graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op = "leaf"
        self._parents: tuple = ()
        self._bwd: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss; populates `.grad` on every
        reachable tensor with requires_grad. A graph can be consumed once."""
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("backward called on a non-finite loss")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward pass")

        # Post-order over graph nodes (leaves excluded; they have no closure).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise GraphError("graph reuses a node consumed by a previous backward pass")
            stack.append((node, True))
            for p in node._parents:
                if p._bwd is not None:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            node._bwd(node.grad)
        for node in order:
            node._consumed = True
            node._bwd = None
            node._parents = ()


def backward(loss: Tensor) -> None:
    """Module-level alias for Tensor.backward."""
    loss.backward()


# -- graph plumbing ---------------------------------------------------------


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def op_node(data: np.ndarray, parents: Sequence[Tensor],
            bwd: Optional[Callable[[np.ndarray], None]], op: str) -> Tensor:
    """Create a graph node from precomputed data and a backward closure.

    The hook other modules use to add custom differentiable ops. `bwd`
    receives the output gradient and must call `accumulate` on each parent.
    """
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = True
        t.grad = None
        t._op = op
        t._parents = tuple(parents)
        t._bwd = bwd
        t._consumed = False
        return t
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._op = op
    t._parents = ()
    t._bwd = None
    t._consumed = False
    return t


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient contribution into `t` (no-op for constants)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` along broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops ------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data + b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return op_node(out, (a, b), bwd, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data - b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return op_node(out, (a, b), bwd, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        accumulate(a, _unbroadcast(g * bd, a.shape))
        accumulate(b, _unbroadcast(g * ad, b.shape))

    return op_node(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, -g)

    return op_node(-a.data, (a,), bwd, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data

    def bwd(g):
        accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape))
        accumulate(b, _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape))

    return op_node(out, (a, b), bwd, "matmul")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        accumulate(a, np.transpose(g, inv))

    return op_node(np.transpose(a.data, axes), (a,), bwd, "permute")


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape

    def bwd(g):
        accumulate(a, g.reshape(old))

    return op_node(a.data.reshape(shape), (a,), bwd, "reshape")


def take(a: Tensor, key) -> Tensor:
    """Indexing/slicing; integer-array keys are supported (gather)."""
    out = a.data[key]
    if isinstance(out, np.ndarray):
        out = out.copy()
    else:
        out = np.asarray(out)

    def bwd(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        accumulate(a, ga)

    return op_node(out, (a,), bwd, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return op_node(out, tuple(tensors), bwd, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table [V, d], ids int array [...] -> [..., d]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bwd(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        accumulate(table, gt)

    return op_node(out, (table,), bwd, "embedding")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        accumulate(a, g * mask)

    return op_node(np.maximum(a.data, 0), (a,), bwd, "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    ad = a.data

    def bwd(g):
        accumulate(a, g * (s * (1.0 + ad * (1.0 - s))))

    return op_node(ad * s, (a,), bwd, "silu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        accumulate(a, np.broadcast_to(gg, shape).copy())

    return op_node(np.asarray(out), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1, _allow_neg_inf: bool = False) -> Tensor:
    """Max-subtracted softmax along `axis`; rejects non-finite input.

    Internally a -inf entry is tolerated when `_allow_neg_inf` (masked
    attention); such entries get exactly zero weight.
    """
    x = a.data
    if _allow_neg_inf:
        bad = np.isnan(x).any() or np.isposinf(x).any()
    else:
        bad = not np.all(np.isfinite(x))
    if bad:
        raise NumericError("softmax input contains non-finite values")
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    m = np.max(x, axis=axis, keepdims=True)
    if _allow_neg_inf and np.isneginf(m).any():
        raise ConfigError("softmax row is fully masked (all -inf)")
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate(a, y * (g - dot))

    return op_node(y, (a,), bwd, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise NumericError("log_softmax input contains non-finite values")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    ls = (x - m) - np.log(e.sum(axis=axis, keepdims=True))
    y = np.exp(ls)

    def bwd(g):
        accumulate(a, g - y * g.sum(axis=axis, keepdims=True))

    return op_node(ls, (a,), bwd, "log_softmax")


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with learned scale."""
    if gain.shape != (a.shape[-1],):
        raise ShapeError(f"rms_norm gain shape {gain.shape} vs feature dim {a.shape[-1]}")
    x, gd = a.data, gain.data
    n = x.shape[-1]
    ms = (x * x).mean(axis=-1, keepdims=True) + eps
    inv = ms ** -0.5
    xn = x * inv

    def bwd(g):
        h = g * gd
        # d/dx of x * (mean(x^2)+eps)^-1/2, per row
        dot = (h * x).sum(axis=-1, keepdims=True)
        accumulate(a, inv * h - (inv ** 3 / n) * x * dot)
        accumulate(gain, (g * xn).reshape(-1, n).sum(axis=0))

    return op_node(xn * gd, (a, gain), bwd, "rms_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(logits).

    logits [N, C], targets int [N], mask float/bool [N] (0 drops a row);
    the mean runs over unmasked rows only.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} vs logits rows {n}")
    if n == 0:
        raise ShapeError("cross_entropy over zero rows")
    if targets.min() < 0 or targets.max() >= c:
        raise ConfigError(f"cross_entropy target id out of range [0, {c})")
    m = np.ones(n, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    msum = m.sum()
    if msum <= 0:
        raise ConfigError("cross_entropy mask drops every row")
    x = logits.data
    mx = x.max(axis=-1, keepdims=True)
    e = np.exp(x - mx)
    ls = (x - mx) - np.log(e.sum(axis=-1, keepdims=True))
    nll = -ls[np.arange(n), targets]
    out = np.asarray((nll * m).sum() / msum)
    y = np.exp(ls)

    def bwd(g):
        d = y.copy()
        d[np.arange(n), targets] -= 1.0
        d *= (m / msum)[:, None] * g
        accumulate(logits, d)

    return op_node(out, (logits,), bwd, "cross_entropy")


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention with a boolean allow-mask.

    q [..., Tq, dh], k [..., Tk, dh], v [..., Tk, dv]; mask is boolean,
    broadcastable to [..., Tq, Tk], True where attention is allowed.
    Masked positions get exactly zero weight; a fully-masked query row is a
    configuration error.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention q/k head dims disagree: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention k/v lengths disagree: {k.shape} vs {v.shape}")
    mask = np.asarray(mask, dtype=bool)
    scores = matmul(q, transpose_last(k))
    scores = mul(scores, 1.0 / math.sqrt(q.shape[-1]))
    full = np.broadcast_to(mask, scores.shape)
    if scores.shape[-2] > 0 and not full.any(axis=-1).all():
        raise ConfigError("attention has a fully-masked query row")
    bias = np.where(full, 0.0, -np.inf).astype(scores.dtype)
    scores = add(scores, Tensor(bias, dtype=scores.dtype))
    weights = softmax(scores, axis=-1, _allow_neg_inf=True)
    return matmul(weights, v)


# -- gradient checking --------------------------------------------------------


def finite_diff_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-4,
                     indices: Optional[Iterable[tuple]] = None) -> dict:
    """Central finite differences of scalar f() w.r.t. selected elements of t.

    Returns {index: derivative}. f() must rebuild its graph from t.data.
    """
    out = {}
    flat = t.data.reshape(-1)
    idxs = list(indices) if indices is not None else list(np.ndindex(t.shape))
    with no_grad():
        for idx in idxs:
            lin = np.ravel_multi_index(idx, t.shape) if t.shape else 0
            save = flat[lin]
            flat[lin] = save + h
            up = f().item()
            flat[lin] = save - h
            dn = f().item()
            flat[lin] = save
            out[idx] = (up - dn) / (2.0 * h)
    return out


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    scale = max(abs(a), abs(b))
    if scale <= floor:
        return 0.0
    return abs(a - b) / scale


def gradcheck(f: Callable[[], Tensor], params: dict, h: float = 1e-4,
              sample: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> dict:
    """Compare analytic grads of scalar f() against central differences.

    params maps name -> Tensor. With `sample`, only that many elements per
    tensor are probed (seeded by rng). Returns {name: max relative error}.
    """
    for t in params.values():
        t.grad = None
    loss = f()
    loss.backward()
    errs = {}
    for name, t in params.items():
        if t.grad is None:
            raise GraphError(f"parameter {name} received no gradient")
        if t.size == 0:
            errs[name] = 0.0
            continue
        if sample is not None and t.size > sample:
            if rng is None:
                rng = np.random.default_rng(0)
            lin = rng.choice(t.size, size=sample, replace=False)
            idxs = [np.unravel_index(i, t.shape) for i in lin]
        else:
            idxs = list(np.ndindex(t.shape))
        fd = finite_diff_grad(f, t, h=h, indices=idxs)
        worst = 0.0
        for idx, num in fd.items():
            worst = max(worst, rel_error(float(t.grad[idx]), num))
        errs[name] = worst
    return errs


def randn(rng: np.random.Generator, shape, std: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    """Seeded normal tensor in the default dtype."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)
