"""Dense numpy-backed tensors with define-by-run reverse-mode differentiation.

Operations run eagerly. When a :class:`Tape` is active and at least one input
requires a gradient, the primitive records a vector-Jacobian closure on the
tape; :meth:`Tape.backward` replays those closures in reverse creation order.

Every matrix product also reports its forward multiply-adds to the current
:class:`FlopCounter`, optionally under a tag set with :func:`flop_tag`.
"""
from __future__ import annotations

import math
import threading
from collections import defaultdict
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ConfigError, NumericError, ShapeError

_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.grad_enabled = True
        _local.counter = FlopCounter()
        _local.tag = None
        _local.guard = True
    return _local


# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------


class FlopCounter:
    """Monotone multiply-add counter with optional per-tag totals."""

    def __init__(self):
        self.total = 0
        self.by_tag: dict[str, int] = defaultdict(int)

    def add(self, count: int, tag: str | None = None) -> None:
        self.total += int(count)
        if tag is not None:
            self.by_tag[tag] += int(count)

    def reset(self) -> None:
        self.total = 0
        self.by_tag.clear()

    def __getitem__(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)

    def __repr__(self):
        return f"FlopCounter(total={self.total}, by_tag={dict(self.by_tag)})"


def flop_counter() -> FlopCounter:
    """Counter currently receiving multiply-adds on this thread."""
    return _state().counter


@contextmanager
def counting(counter: FlopCounter | None = None):
    """Route multiply-adds to ``counter`` (a fresh one by default) inside the block."""
    st = _state()
    counter = FlopCounter() if counter is None else counter
    prev, st.counter = st.counter, counter
    try:
        yield counter
    finally:
        st.counter = prev


@contextmanager
def flop_tag(tag: str | None):
    st = _state()
    prev, st.tag = st.tag, tag
    try:
        yield
    finally:
        st.tag = prev


def matmul_flops(a_shape: Sequence[int], b_shape: Sequence[int]) -> int:
    """Multiply-adds of ``a @ b`` for ``a: (..., m, k)`` and ``b: (..., k, n)``."""
    batch = np.broadcast_shapes(tuple(a_shape[:-2]), tuple(b_shape[:-2]))
    return int(np.prod(batch, dtype=np.int64)) * a_shape[-2] * a_shape[-1] * b_shape[-1]


def count_matmul(a_shape, b_shape, tag: str | None = None) -> None:
    st = _state()
    st.counter.add(matmul_flops(a_shape, b_shape), tag if tag is not None else st.tag)


def np_matmul(a: np.ndarray, b: np.ndarray, tag: str | None = None) -> np.ndarray:
    """Plain ``a @ b`` on arrays that still reports to the FLOP counter."""
    if a.ndim == 1:
        count_matmul((1,) + a.shape, b.shape, tag)
    else:
        count_matmul(a.shape, b.shape, tag)
    return a @ b


# ---------------------------------------------------------------------------
# Tape and grad mode
# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Use as a context manager; tapes nest, the innermost one records.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: "Tensor", inputs: tuple, vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Gradients of scalar ``loss`` for every grad-enabled leaf; consumes the tape.

        Each leaf's ``.grad`` is also set.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t._leaf:
                    leaves[key] = t
        self._nodes.clear()
        result = {}
        for key, t in leaves.items():
            t.grad = grads[key]
            result[t] = grads[key]
        return result


def backward(tape: Tape, loss: "Tensor") -> dict["Tensor", np.ndarray]:
    return tape.backward(loss)


@contextmanager
def no_grad():
    st = _state()
    prev, st.grad_enabled = st.grad_enabled, False
    try:
        yield
    finally:
        st.grad_enabled = prev


@contextmanager
def numeric_guard(enabled: bool):
    """Toggle the NaN/Inf check that runs after every primitive."""
    st = _state()
    prev, st.guard = st.guard, enabled
    try:
        yield
    finally:
        st.guard = prev


def _recording_tape(inputs) -> Tape | None:
    st = _state()
    if not st.tapes or not st.grad_enabled:
        return None
    if any(t.requires_grad for t in inputs):
        return st.tapes[-1]
    return None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense real array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._leaf = False
        return t

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("division by a tensor is not a primitive")
        return scale(self, 1.0 / c)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else (axes or None))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(kind: str, data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    if _state().guard and not np.all(np.isfinite(data)):
        raise NumericError(f"{kind} produced non-finite values")
    tape = _recording_tape(inputs)
    out = Tensor._wrap(data, tape is not None)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b, tag: str | None = None) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        count_matmul(a.shape, b.shape, tag)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", out, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` applied along the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    count_matmul(x2.shape, weight.shape)
    out = (x2 @ weight.data).reshape(x.shape[:-1] + (n,))
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n,):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({n},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, n)
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result("linear", out, inputs, vjp)


# Alias kept for the primitive catalogue.
embedding = linear


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (True = keep) zeroes excluded entries."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(mask, x.shape)
        shifted = np.where(mask, x.data, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x.data - m, 0.0)), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result("softmax", p, (x,), vjp)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat
    inputs = [x]
    if gamma is not None:
        gamma = as_tensor(gamma)
        out = out * gamma.data
        inputs.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        out = out + beta.data
        inputs.append(beta)

    def vjp(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return _result("layer_norm", out, tuple(inputs), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result("mean", np.asarray(out), (x,), vjp)


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _result("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Iterable, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None
    return _result("stack", out, xs,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def dropout(x, p: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout: kept activations are scaled by ``1/(1-p)`` at train time."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def _check_labels(kind, scores, labels):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"{kind}: scores {scores.shape} vs {labels.shape[0]} labels")
    return labels


def cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = _check_labels("cross_entropy", logits, labels)
    n = len(labels)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _result("cross_entropy", np.asarray(loss), (logits,), vjp)


def nll(probs, labels) -> Tensor:
    """Mean over the batch of ``-log probs[label]`` for already-normalised rows."""
    probs = as_tensor(probs)
    labels = _check_labels("nll", probs, labels)
    n = len(labels)
    picked = probs.data[np.arange(n), labels]
    with np.errstate(divide="ignore"):
        loss = -np.log(picked).mean()

    def vjp(g):
        grad = np.zeros_like(probs.data)
        grad[np.arange(n), labels] = -(g / n) / picked
        return (grad,)

    return _result("nll", np.asarray(loss), (probs,), vjp)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "linear": linear, "embedding": embedding, "relu": relu, "softmax": softmax,
    "layer_norm": layer_norm, "sum": sum_, "mean": mean, "concat": concat,
    "stack": stack, "transpose": transpose, "reshape": reshape, "abs": abs_,
    "dropout": dropout, "cross_entropy": cross_entropy, "nll": nll,
}


def apply(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ConfigError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6,
               coords: Iterable[int] | None = None, floor: float = 1e-6) -> float:
    """Max relative error between the tape gradient and central differences.

    ``coords`` restricts the comparison to the given flat indices. The
    relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    vanishing gradients from amplifying finite-difference round-off.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    if isinstance(point, Tensor) and point.dtype != np.float64:
        raise ConfigError("grad_check needs a 64-bit point")
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    analytic = tape.backward(out).get(x)
    if analytic is None:
        analytic = np.zeros_like(base)
    analytic = analytic.reshape(-1)
    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in coords:
            plus, minus = flat.copy(), flat.copy()
            plus[i] += eps
            minus[i] -= eps
            f_plus = fn(Tensor(plus.reshape(base.shape))).item()
            f_minus = fn(Tensor(minus.reshape(base.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def xavier_uniform(shape: Sequence[int], rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Uniform(-b, b) with ``b = sqrt(6 / (fan_in + fan_out))`` over the last two axes."""
    fan_in, fan_out = shape[-2], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
