"""Dense fp64 tensors with a small reverse-mode autodiff engine.

Define-by-run: every operation whose inputs require gradients records a node
holding parent links and a vector-Jacobian closure. ``backward`` replays the
recorded graph once, in reverse topological order; a consumed graph cannot be
replayed. Graphs are rebuilt on every forward pass.

Broadcasting is deliberately narrow: operand shapes must match exactly, or the
smaller operand's shape must equal the trailing dimensions of the larger one
(a row vector against a matrix, a scalar against anything). Everything is
float64; every completed operation is checked for NaN/Inf.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes do not conform under the supported broadcasting rules."""


class GraphError(RuntimeError):
    """Backward misuse: non-scalar loss or replay of a consumed graph."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _as_f64(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_f64(values)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        return sum_(self)

    def mean(self) -> "Tensor":
        return mean_(self)

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, constant(1.0 / float(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return constant(value)


def _node(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result; record the graph node only when a parent needs grad."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


# -- broadcasting helpers -----------------------------------------------------

def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"shapes do not conform: {sa} vs {sb}")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient over the leading axes that were broadcast."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


# -- arithmetic ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def vjp(g: Array):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# -- pointwise functions ------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError(f"log requires positive values, min={a.data.min()!r}")
    out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g: Array):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), vjp)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xhat = centered / s

    def vjp(g: Array):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) / s,)

    return _node(xhat, (a,), vjp)


# -- structural ops -----------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: table [V x H] indexed by an integer id sequence."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {idx.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"id out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}")
    out = table.data[idx]

    def vjp(g: Array):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _node(out, (table,), vjp)


def masked_mean(a: Tensor, mask) -> Tensor:
    """Mean over axis 0 restricted to rows where mask is true."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 1 or m.shape[0] != a.shape[0]:
        raise ShapeError(f"mask shape {m.shape} does not match leading dim of {a.shape}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("masked_mean over an empty mask")
    out = a.data[m].mean(axis=0)

    def vjp(g: Array):
        ga = np.zeros_like(a.data)
        ga[m] = g / count
        return (ga,)

    return _node(out, (a,), vjp)


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: out[i, j] = ||a_i - b_j||^2."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist expects [N x H] and [M x H], got {a.shape}, {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    # sum of squares is >= 0 by construction; the clamp only absorbs round-off
    out = np.maximum((diff * diff).sum(axis=-1), 0.0)

    def vjp(g: Array):
        scaled = 2.0 * g[:, :, None] * diff
        return scaled.sum(axis=1), -scaled.sum(axis=0)

    return _node(out, (a, b), vjp)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack_rows of an empty sequence")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack_rows shapes differ: {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=0)

    def vjp(g: Array):
        return tuple(g[i] for i in range(len(tensors)))

    return _node(out, tuple(tensors), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {a.shape}")
    out = a.data[:, start:stop].copy()

    def vjp(g: Array):
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return (ga,)

    return _node(out, (a,), vjp)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_cols of an empty sequence")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError("concat_cols expects 2-D tensors with equal row counts")
    widths = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    edges = np.cumsum([0] + widths)

    def vjp(g: Array):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(tensors)))

    return _node(out, tuple(tensors), vjp)


def pick(a: Tensor, index: int) -> Tensor:
    """Select one element of a 1-D tensor as a scalar."""
    if a.data.ndim != 1:
        raise ShapeError(f"pick expects a 1-D tensor, got {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise ValueError(f"pick index {index} out of range for length {a.shape[0]}")
    out = a.data[index].reshape(())

    def vjp(g: Array):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _node(out, (a,), vjp)


def sum_(a: Tensor) -> Tensor:
    out = a.data.sum().reshape(())
    return _node(out, (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean().reshape(())
    return _node(out, (a,), lambda g: (np.full(a.shape, float(g) / n),))


# -- backward -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every requires_grad leaf.

    The loss must be scalar. Each recorded node is visited exactly once and its
    closure is dropped afterwards, so a graph (or any shared subgraph) can back
    up only one backward pass.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo_order(loss)
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            if node._vjp is None:
                raise GraphError("subgraph already consumed by a previous backward")
            parent_grads = node._vjp(g)
            node._vjp = None
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    loss._consumed = True


# -- gradient oracle ----------------------------------------------------------

def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient of f at x and central
    finite differences: |a - n| / (|a| + |n| + 1e-12), maximized over checked
    coordinates. ``max_coords`` limits the check to a seeded coordinate sample;
    by default every coordinate is checked. f must be deterministic.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    analytic = analytic.ravel()

    base = x.data.copy().ravel()
    n = base.size
    if max_coords is not None and max_coords < n:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    worst = 0.0
    for i in coords:
        shifted = base.copy()
        shifted[i] = base[i] + step
        try:
            fp = f(constant(shifted.reshape(x.shape))).item()
            shifted[i] = base[i] - step
            fm = f(constant(shifted.reshape(x.shape))).item()
        except (NonFiniteError, ValueError) as err:
            raise NonFiniteError(f"non-finite intermediate at coordinate {int(i)}: {err}") from err
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[i]
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        if rel > worst:
            worst = rel
    return worst
