"""Dense array algebra, a reverse-mode autodiff tape, RNG and gradient checking.

All numbers are float64 numpy arrays. A :class:`Tensor` wraps one array and
remembers how it was produced; :func:`backward` sweeps the recorded graph in
reverse creation order and accumulates adjoints into ``Tensor.grad``.

Broadcasting follows numpy. Gradients flowing into a broadcast operand are
summed back down to that operand's shape.
"""
from __future__ import annotations

import contextlib
import itertools
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, ShapeError

_ids = itertools.count()
_meters: list["AllocationMeter"] = []


class AllocationMeter:
    """Counts float entries of every Tensor created while active."""

    def __init__(self):
        self.elements = 0


@contextlib.contextmanager
def track_allocations():
    meter = AllocationMeter()
    _meters.append(meter)
    try:
        yield meter
    finally:
        _meters.remove(meter)


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A node in the computation graph.

    ``parents`` always hold lower ``id`` values than the node itself, so
    sorting reachable nodes by ``id`` gives a valid topological order.
    """

    __slots__ = ("value", "parents", "backward_fn", "grad", "requires_grad", "id", "op")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = as_array(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.op = op
        for meter in _meters:
            meter.elements += self.value.size

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def constant(x) -> Tensor:
    return Tensor(x)


def variable(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op) -> Tensor:
    return Tensor(value, parents, backward_fn, op=op)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def bw(g):
        return (unbroadcast(g / b.value, a.shape),
                unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), bw, "div")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with ``floor > 0`` the input is clamped below first."""
    if floor > 0:
        clipped = a.value < floor
        x = np.where(clipped, floor, a.value)
        return _node(np.log(x), (a,), lambda g: (np.where(clipped, 0.0, g / x),), "log")
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def xlogx(a: Tensor) -> Tensor:
    """Elementwise x·ln x with 0·ln 0 := 0 (gradient at 0 taken as 0)."""
    x = a.value
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, x * np.log(safe), 0.0)
    return _node(out, (a,), lambda g: (np.where(pos, g * (np.log(safe) + 1.0), 0.0),), "xlogx")


def square(a: Tensor) -> Tensor:
    return _node(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-d operands")
    inner_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    # vectors are promoted to matrices so a single backward rule applies
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(np.matmul(a.value, b.value), (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _node(np.swapaxes(a.value, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    return reshape(a, np.expand_dims(a.value, axis).shape)


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tensors, bw, "concat")


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = permitted) excludes entries: they
    get probability exactly 0. Every slice must keep at least one entry.
    """
    out = softmax_array(a.value, axis=axis, mask=mask)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def softmax_array(z: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    z = as_array(z)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ContractError("softmax: a slice has no permitted entries")
        z = np.where(mask, z, -np.inf)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor, seed_grad: np.ndarray | None = None) -> list[Tensor]:
    """Populate ``grad`` on every node reachable from ``loss``.

    Returns the leaves that require gradients, in creation order.
    """
    if seed_grad is None and loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _reachable(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value) if seed_grad is None else as_array(seed_grad)
    leaves = []
    for node in reversed(order):
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        if node.backward_fn is None:
            if node.requires_grad:
                leaves.append(node)
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    leaves.sort(key=lambda t: t.id)
    return leaves


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {root.id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.id not in seen and p.requires_grad:
                seen[p.id] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t.id)


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Value and gradients of scalar ``f`` with respect to each argument."""
    leaves = [variable(a) for a in args]
    out = f(*leaves)
    backward(out)
    return float(out.value), [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
                              for leaf in leaves]


# ---------------------------------------------------------------------------
# plain array helpers
# ---------------------------------------------------------------------------

def matmul_array(a, b) -> np.ndarray:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    m = np.atleast_2d(as_array(m))
    if m.size == 0:
        raise ContractError("softmax_rows needs a nonempty matrix")
    return softmax_array(m, axis=1)


def finite_diff_check(f: Callable[[Tensor], Tensor], at, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error per entry is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    x = as_array(at).copy()
    _, (analytic,) = grad(f, x)

    def value(z):
        v = float(f(constant(z)).value)
        if not math.isfinite(v):
            raise EvaluationError("finite_diff_check: non-finite function value")
        return v

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value(x)
        flat[i] = orig - h
        down = value(x)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

class Rng:
    """Seeded counter-based generator (Philox) with named sub-streams.

    ``Rng(seed).stream("gumbel", epoch)`` is independent of the parent and of
    other names, and depends only on the seed and the keys, never on how much
    of any other stream was consumed.
    """

    def __init__(self, seed: int, keys: Iterable[int | str] = ()):
        self.seed = int(seed)
        self.keys = tuple(keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_key_int(k) for k in self.keys]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def stream(self, *keys) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    # stable across processes, unlike hash()
    return zlib.crc32(str(k).encode("utf-8"))


GUMBEL_EPS = 1e-12


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(as_array(u), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def gumbel_sample(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ContractError("gumbel_sample: n must be >= 1")
    return gumbel_from_uniform(rng.uniform(size=n))
