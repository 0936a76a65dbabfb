"""Dense array primitives with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and remembers the op and operands that
produced it. Calling :func:`backward` on a scalar tensor walks the recorded
graph in reverse topological order (the tape) and fills ``.grad`` on every
node. Gradients are recomputed from scratch on each call, so running backward
twice on the same graph yields identical results.

All ops accept a leading batch dimension; the single-vector forms used in the
model's recurrences are the ``B = 1`` or 1-D special cases.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "linear_map",
    "activation",
    "sigmoid",
    "tanh",
    "softmax",
    "elementwise",
    "blend",
    "add",
    "mul",
    "scale",
    "concat",
    "take_columns",
    "take_along",
    "einsum",
    "matmul",
    "reshape",
    "broadcast",
    "total",
    "clamped_log",
    "divide",
    "gradient_check",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared; ``op`` names the producing operation."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rsub__(self, other):
        # used as ``1 - z`` in the gated update
        return add(scale(self, -1.0), as_tensor(np.full_like(self.data, other)))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, check_finite: bool = False) -> None:
    """Fill ``.grad`` for every differentiable node reachable from ``root``.

    ``root`` must hold a single value. With ``check_finite`` the first op whose
    gradient contains NaN or Inf is reported through :class:`NonFiniteError`.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient flowing out of '{node.op}'", op=node.op)
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------- linear algebra

def linear_map(W, x) -> Tensor:
    """``y = x @ W.T``; ``x`` is ``(..., in)`` and ``W`` is ``(out, in)``."""
    W, x = as_tensor(W), as_tensor(x)
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[1]:
        raise ShapeError(f"linear_map: W {W.data.shape} cannot act on x {x.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, W.data.shape[1])
    y = (x2 @ W.data.T).reshape(*lead, W.data.shape[0])

    def back(g):
        g2 = g.reshape(-1, W.data.shape[0])
        dW = g2.T @ x2 if W.requires_grad else None
        dx = (g2 @ W.data).reshape(x.data.shape) if x.requires_grad else None
        return dW, dx

    return _make(y, (W, x), back, "linear_map")


def matmul(x, E) -> Tensor:
    """``y = x @ E``; ``x`` is ``(..., d)`` and ``E`` is ``(d, n)``."""
    x, E = as_tensor(x), as_tensor(E)
    if E.data.ndim != 2 or x.data.shape[-1] != E.data.shape[0]:
        raise ShapeError(f"matmul: x {x.data.shape} and E {E.data.shape} do not align")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, E.data.shape[0])
    y = (x2 @ E.data).reshape(*lead, E.data.shape[1])

    def back(g):
        g2 = g.reshape(-1, E.data.shape[1])
        dx = (g2 @ E.data.T).reshape(x.data.shape) if x.requires_grad else None
        dE = x2.T @ g2 if E.requires_grad else None
        return dx, dE

    return _make(y, (x, E), back, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum; every index of each operand must appear in the
    output or in the other operand (no implicit traces)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(ch not in out and ch not in other for ch in own):
            raise ShapeError(f"einsum '{subscripts}': unsupported reduction pattern")
    y = np.einsum(subscripts, a.data, b.data)

    def back(g):
        da = np.einsum(f"{out},{sb}->{sa}", g, b.data) if a.requires_grad else None
        db = np.einsum(f"{out},{sa}->{sb}", g, a.data) if b.requires_grad else None
        return da, db

    return _make(y, (a, b), back, "einsum")


# ---------------------------------------------------------------- elementwise

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if d.dtype.kind != "f":
        d = d.astype(np.float64)
    # 1 / (1 + exp(-d)) written through logaddexp so exp never overflows
    y = np.exp(-np.logaddexp(0.0, -d))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def activation(kind: str, x) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation '{kind}'")


def _same_shape(op, *arrays):
    shapes = {a.data.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"{op}: operand shapes differ {sorted(shapes)}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data + b.data
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data * b.data

    def back(g):
        da = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        db = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return da, db

    return _make(y, (a, b), back, "mul")


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    y = a.data / b.data

    def back(g):
        da = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        db = _unbroadcast(-g * y / b.data, b.data.shape) if b.requires_grad else None
        return da, db

    return _make(y, (a, b), back, "divide")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def blend(z, a, b) -> Tensor:
    """``z * a + (1 - z) * b``, the convex gate of the recurrent update."""
    z, a, b = as_tensor(z), as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"blend: operand shapes differ {a.data.shape} vs {b.data.shape}")
    y = z.data * a.data + (1.0 - z.data) * b.data

    def back(g):
        dz = _unbroadcast(g * (a.data - b.data), z.data.shape) if z.requires_grad else None
        da = _unbroadcast(g * z.data, a.data.shape) if a.requires_grad else None
        db = _unbroadcast(g * (1.0 - z.data), b.data.shape) if b.requires_grad else None
        return dz, da, db

    return _make(y, (z, a, b), back, "blend")


def elementwise(kind: str, a, b, z=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if kind == "blend":
        if z is None:
            raise ValueError("blend needs a gate vector z")
        z = as_tensor(z)
        _same_shape("blend", z, a, b)
        return blend(z, a, b)
    _same_shape(kind, a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "add":
        return add(a, b)
    raise ValueError(f"unknown elementwise kind '{kind}'")


def clamped_log(x, floor: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    safe = np.maximum(x.data, floor)
    y = np.log(safe)
    return _make(y, (x,), lambda g: (np.where(x.data > floor, g / safe, 0.0),), "log")


# ---------------------------------------------------------------- structure

def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    y = np.concatenate([p.data for p in parts], axis=axis)
    bounds, edge = [], 0
    for p in parts[:-1]:
        edge += p.data.shape[axis]
        bounds.append(edge)

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(y, parts, back, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),), "reshape")


def broadcast(x, shape) -> Tensor:
    x = as_tensor(x)
    y = np.broadcast_to(x.data, shape)
    return _make(y, (x,), lambda g: (_unbroadcast(g, x.data.shape),), "broadcast")


def take_columns(E, idx) -> Tensor:
    """Gather columns of ``E`` (``d x n``): result has shape ``idx.shape + (d,)``."""
    E = as_tensor(E)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= E.data.shape[1]):
        raise IndexError(f"column index out of range for matrix with {E.data.shape[1]} columns")
    y = E.data.T[idx]

    def back(g):
        d = E.data.shape[0]
        acc = np.zeros((E.data.shape[1], d), dtype=g.dtype)
        np.add.at(acc, idx.ravel(), g.reshape(-1, d))
        return (acc.T,)

    return _make(y, (E,), back, "take_columns")


def take_along(x, idx, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    y = np.take_along_axis(x.data, idx, axis=axis)

    def back(g):
        acc = np.zeros_like(x.data, dtype=g.dtype)
        ax = axis % x.data.ndim
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(acc, tuple(grids), g)
        return (acc,)

    return _make(y, (x,), back, "take_along")


def total(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(y, (x,), back, "sum")


def softmax(logits, mask=None, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``.

    Entries where ``mask`` is false get probability 0. A slice with no valid
    entry yields all zeros.
    """
    x = as_tensor(logits)
    if x.data.size == 0 or x.data.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        d = np.where(mask, d, -np.inf)
    m = np.max(d, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(d - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "softmax")


# ---------------------------------------------------------------- verification

def gradient_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5,
                   max_coords: int | None = 64, rng: np.random.Generator | None = None) -> float:
    """Compare the tape gradient with central differences.

    ``loss_fn`` rebuilds the graph from the current contents of ``params`` and
    returns a scalar tensor. Up to ``max_coords`` coordinates per parameter are
    sampled (all of them when ``None``). Parameters must be float64 or wider;
    ``np.longdouble`` lowers the round-off floor of the differences on
    coordinates with very small gradients. Returns the maximum of
    ``|a - n| / max(1e-8, |a| + |n|)`` over the sampled coordinates.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    def evaluate():
        out = loss_fn()
        # stay in the parameter dtype; a Python float would cap precision at float64
        value = np.asarray(out.data).reshape(())[()]
        if not np.isfinite(value):
            raise NonFiniteError(_find_nonfinite(out), op=_first_nonfinite_op(out))
        return value

    root = loss_fn()
    if not np.isfinite(root.data).all():
        raise NonFiniteError(_find_nonfinite(root), op=_first_nonfinite_op(root))
    backward(root)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        if p.data.dtype.kind != "f" or np.finfo(p.data.dtype).eps > np.finfo(np.float64).eps:
            raise TypeError("gradient_check requires float64 or wider parameters")
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, float(err))
    return worst


def _first_nonfinite_op(root: Tensor) -> str | None:
    for node in _topological(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def _find_nonfinite(root: Tensor) -> str:
    op = _first_nonfinite_op(root)
    return f"non-finite loss; first produced by op '{op}'"
