"""A small reverse-mode differentiation engine over dense float64 matrices.

Every value is a 2-D :class:`Tensor`.  Operations record their parents and a
closure that pushes the output gradient back to them; :meth:`Tensor.backward`
replays those closures in reverse construction order, so gradients are
accumulated in a fixed, deterministic sequence.

Binary elementwise ops broadcast like numpy (e.g. a ``(1, n)`` bias against an
``(m, n)`` matrix) and reduce the gradient back to each operand's shape.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Build values without recording the graph (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        # collect the reachable subgraph, then replay newest-first
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._id, reverse=True)

        pending: dict[int, np.ndarray] = {self._id: np.asarray(grad, dtype=np.float64)}
        for t in nodes:
            g = pending.pop(t._id, None)
            if g is None:
                continue
            if t._backward is None:
                t._accum(g)
            else:
                for parent, pg in zip(t._parents, t._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent._id in pending:
                        pending[parent._id] = pending[parent._id] + pg
                    else:
                        pending[parent._id] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite result in {op}")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ValueError(f"concat_rows column mismatch {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.vstack([p.data for p in parts]), parts, back, "concat_rows")


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.hstack([p.data for p in parts]), parts, back, "concat_cols")


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = a.shape

    def back(g):
        out = np.zeros(n)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "gather_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape

    def back(g):
        out = np.zeros(n)
        out[:, start:stop] = g
        return (out,)

    return _make(a.data[:, start:stop].copy(), (a,), back, "slice_cols")


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)

    return _make(out, (a, b), back, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a, p: float) -> Tensor:
    """Elementwise ``a**p`` for a constant exponent."""
    a = as_tensor(a)
    ad = a.data
    p = float(p)
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` in the overflow-safe form."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


# ----------------------------------------------------------------------------
# reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _make(
            np.array([[a.data.sum()]]), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
        )
    out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def max_over(a, axis: int = 1) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    shape = a.shape
    if axis == 1:
        rows = np.arange(shape[0])
        out = a.data[rows, idx][:, None]

        def back(g):
            full = np.zeros(shape)
            full[rows, idx] = g[:, 0]
            return (full,)

    else:
        cols = np.arange(shape[1])
        out = a.data[idx, cols][None, :]

        def back(g):
            full = np.zeros(shape)
            full[idx, cols] = g[0]
            return (full,)

    return _make(out, (a,), back, "max_over")


# ----------------------------------------------------------------------------
# normalisation and neural-net helpers


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax; entries with ``mask == False`` get probability 0.

    A row with no unmasked entries is returned as all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (a,), back, "softmax_rows")


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm < eps become zero."""
    a = as_tensor(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    ok = n >= eps
    safe = np.where(ok, n, 1.0)
    out = np.where(ok, x / safe, 0.0)

    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (np.where(ok, (g - out * dot) / safe, 0.0),)

    return _make(out, (a,), back, "normalize_rows")


def cosine_rows(a, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of paired rows, shape ``(n, 1)``.

    Zero when either row has norm below ``eps``.
    """
    return sum(mul(normalize_rows(a, eps), normalize_rows(b, eps)), axis=1)


def cosine_matrix(a, b, eps: float = 1e-12) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` and rows of ``b``."""
    return matmul(normalize_rows(a, eps), transpose(normalize_rows(b, eps)))


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def signed_gem(x, p, eps: float = 1e-6) -> Tensor:
    """Sign-preserving generalised mean over rows, shape ``(1, cols)``.

    ``m = mean_i sign(x_i)|x_i|^p`` followed by the smooth odd root
    ``m * (m^2 + eps^2)^((1/p - 1)/2)``, which equals ``sign(m)|m|^(1/p)``
    up to O(eps^2) and stays differentiable at ``m = 0``.  ``p`` is a
    ``(1, 1)`` tensor clamped below at 1.
    """
    x, p = as_tensor(x), as_tensor(p)
    pv = p.data[0, 0]
    p_active = pv >= 1.0
    pe = max(pv, 1.0)
    n = x.shape[0]
    ax = np.abs(x.data)
    sx = np.sign(x.data)
    powed = ax**pe
    m = (sx * powed).mean(axis=0, keepdims=True)
    k = (1.0 / pe - 1.0) / 2.0
    q = m * m + eps * eps
    qk = q**k
    out = m * qk

    def back(g):
        # d out / d m
        dm = qk + m * k * q ** (k - 1.0) * 2.0 * m
        gm = g * dm
        gx = gm * (pe * ax ** (pe - 1.0)) / n
        gp = None
        if p_active:
            with np.errstate(divide="ignore"):
                logax = np.where(ax > 0, np.log(np.where(ax > 0, ax, 1.0)), 0.0)
            dm_dp = (sx * powed * logax).mean(axis=0, keepdims=True)
            # out = m * q^k with k = (1/p - 1)/2 also depends on p directly
            dk_dp = -0.5 / (pe * pe)
            dout_dp_direct = out * np.log(q) * dk_dp
            gp = np.array([[float((gm * dm_dp).sum() + (g * dout_dp_direct).sum())]])
        else:
            gp = np.zeros((1, 1))
        return gx, gp

    return _make(out, (x, p), back, "signed_gem")


# ----------------------------------------------------------------------------
# gradient checking


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` w.r.t. ``x.data``."""
    g = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    with no_grad():
        for _ in it:
            i = it.multi_index
            orig = x.data[i]
            hi, lo = orig + h, orig - h
            x.data[i] = hi
            fp = f().item()
            x.data[i] = lo
            fm = f().item()
            x.data[i] = orig
            # divide by the step actually taken, not the nominal 2h
            g[i] = (fp - fm) / (hi - lo)
    return g


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float | None = None,
) -> float:
    """Largest normwise relative error between backprop and central differences.

    ``f`` takes no arguments and closes over the tensors in ``x``.  The error
    for each tensor is ``max|g_bp - g_fd| / max(max|g_bp|, max|g_fd|, floor)``
    with ``floor = 1e-7 * max(1, |f|)``: gradients that vanish analytically
    are then compared against the difference quotient's rounding noise rather
    than divided by it.  If ``tol`` is given and exceeded, ``AssertionError``
    is raised.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    floor = 1e-7 * max(1.0, abs(out.item()))
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(f, t, h)
        scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        err = float(np.abs(analytic - numeric).max(initial=0.0) / scale_)
        worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: {worst:.3e} > {tol:.1e}")
    return worst
