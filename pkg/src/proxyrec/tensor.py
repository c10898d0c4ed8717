"""Dense reverse-mode differentiable arrays.

A ``Tensor`` wraps a numpy array and remembers the op that produced it.
Calling :func:`backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into every tensor that
requires them.  Only the operators needed by the recommender live here.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericalError(ArithmeticError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of the calling contract was violated."""


class ConfigError(ValueError):
    """An op was given an invalid hyper-parameter."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported precision {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_array(values, dtype=None) -> np.ndarray:
    arr = np.asarray(values)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        return arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = _as_array(values, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values produced by {op}")


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(values, op)
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(
        values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values - b.values
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make(
        values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    return _make(
        values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.matmul(a.values, b.values)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(values, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last"
    )


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(values, tensors, backward, "concat")


def concat_cols(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-1)


def concat_rows(tensors: Sequence) -> Tensor:
    return concat(tensors, axis=-2)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.broadcast_to(a.values, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        "broadcast_to",
    )


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.values)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(a.values[key]), (a,), backward, "index")


def take_rows(weight, ids) -> Tensor:
    """Gather rows of a 2-D table; negative ids yield zero rows."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids >= weight.shape[0]):
        raise IndexError(f"row id out of range for table with {weight.shape[0]} rows")
    valid = ids >= 0
    safe = np.where(valid, ids, 0)
    values = weight.values[safe] * valid[..., None]

    def backward(g):
        out = np.zeros_like(weight.values)
        np.add.at(out, safe[valid], g[valid])
        return (out,)

    return _make(values, (weight,), backward, "take_rows")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    values = np.sum(a.values, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(values), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def identity(a) -> Tensor:
    return as_tensor(a)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.values > 0, 1.0, slope).astype(a.dtype)
    return _make(a.values * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    a = as_tensor(a)
    x = a.values
    e = np.exp(-np.abs(x))
    values = np.maximum(x, 0) + np.log1p(e)
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(values, (a,), lambda g: (g * s,), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported as NumericalError
        values = np.exp(a.values)
    return _make(values, (a,), lambda g: (g * values,), "exp")


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean) marks admissible entries; masked entries
    get probability zero, which is the limit of a -inf logit.
    """
    x = as_tensor(x)
    z = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax_rows(x, mask=None) -> Tensor:
    x = as_tensor(x)
    z = x.values
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - s * np.sum(g, axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.values * x.values, axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.values / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def layer_norm_rows(x, eps: float = 1e-9) -> Tensor:
    """(x - mean) / std over the last axis, population std, no affine."""
    x = as_tensor(x)
    mu = np.mean(x.values, axis=-1, keepdims=True)
    centered = x.values - mu
    std = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered / std

    def backward(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gx = np.mean(g * xhat, axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / std,)

    return _make(xhat, (x,), backward, "layer_norm")


def dropout(x, p: float, seed: int | None, training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``seed``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _make(x.values * keep, (x,), lambda g: (g * keep,), "dropout")


class DropoutStream:
    """Hands out per-call dropout seeds from a global seed and a counter."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0

    def next_seed(self) -> int:
        self.counter += 1
        return int(np.random.SeedSequence([self.seed, self.counter]).generate_state(1)[0])


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": identity,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise ContractError("backward requires a scalar Tensor")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward of {node.op}")
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def numerical_gradient(f: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``target``."""
    grad = np.zeros_like(target.values, dtype=np.float64)
    flat = target.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(f().values.sum())
        flat[i] = orig - step
        minus = float(f().values.sum())
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    # below ``floor`` the comparison is absolute: a gradient that is exactly
    # zero has pure round-off noise as its finite-difference estimate
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(
    f: Callable[[], Tensor], targets: Iterable[Tensor], step: float = 1e-5
) -> dict[int, float]:
    """Compare backprop against finite differences; returns rel. error per target."""
    targets = list(targets)
    for t in targets:
        t.grad = None
    backward(f())
    errors = {}
    for i, t in enumerate(targets):
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
        errors[i] = relative_error(analytic, numerical_gradient(f, t, step))
    return errors
