"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every op produces a new :class:`Tensor`. When any input requires a gradient the
result records its parents and a backward closure, and receives a node id from a
global counter. Node ids give the append order of the graph; :func:`backward`
walks the nodes reachable from the loss in reverse id order, each exactly once.

All data is float64. Arrays are C-ordered numpy arrays, i.e. flat row-major
storage with a shape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.node_id = -1

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.op = "leaf"
        t.parents = ()
        t._backward = None
        t.node_id = -1
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward_fn
        out.node_id = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, "mul", (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, "scale", (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record(out, "relu", (a,), lambda g: (g * (out > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            # fold batch axes so the weight gradient is a single GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, "matmul", (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight of shape (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = flat.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0).reshape(bias.shape)

    return _record(out, "linear", parents, backward)


def _segment_scatter(flat_idx: np.ndarray, n_rows: int):
    order = np.argsort(flat_idx, kind="stable")
    sorted_idx = flat_idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sorted_idx[1:] != sorted_idx[:-1])))
    targets = sorted_idx[starts]

    def scatter(g2: np.ndarray) -> np.ndarray:
        out = np.zeros((n_rows, g2.shape[1]))
        out[targets] = np.add.reduceat(g2[order], starts, axis=0)
        return out

    return scatter


def linear_sum(terms: Sequence, bias) -> Tensor:
    """Fused ``sum_i gather_i(x_i @ W_i) + bias``.

    ``terms`` holds ``(x, W, idx)`` triples. With ``idx`` None the product is used
    as is; otherwise ``x`` is (B, N, d) and the product is row-gathered with
    ``idx`` of shape (B, ...) as in :func:`gather_rows`. All products must reach
    the same output shape. Equal to a linear layer over the concatenation of the
    (gathered) inputs with the stacked weight blocks.
    """
    bias = as_tensor(bias)
    prepared = []
    out = None
    for x, W, idx in terms:
        x, W = as_tensor(x), as_tensor(W)
        if x.shape[-1] != W.shape[0]:
            raise ShapeError(f"linear_sum: incompatible shapes {x.shape} and {W.shape}")
        flat = x.data.reshape(-1, x.shape[-1])
        y = flat @ W.data
        if idx is None:
            y = y.reshape(x.shape[:-1] + (W.shape[1],))
            scatter = None
        else:
            idx = np.asarray(idx, dtype=np.intp)
            B, N = x.shape[0], x.shape[1]
            flat_idx = (idx.reshape(B, -1) + (np.arange(B) * N)[:, None]).reshape(-1)
            y = y[flat_idx].reshape(idx.shape + (W.shape[1],))
            scatter = _segment_scatter(flat_idx, B * N) if (x.requires_grad or W.requires_grad) else None
        if out is None:
            out = y
        elif out.shape != y.shape:
            raise ShapeError(f"linear_sum: term shapes {out.shape} and {y.shape} differ")
        else:
            out += y
        prepared.append((x, W, flat, scatter))
    out += bias.data
    parents = [t for x, W, _, _ in prepared for t in (x, W)] + [bias]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = []
        for x, W, flat, scatter in prepared:
            gy = g2 if scatter is None else scatter(g2)
            grads.append((gy @ W.data.T).reshape(x.shape) if x.requires_grad else None)
            grads.append(flat.T @ gy if W.requires_grad else None)
        grads.append(g2.sum(axis=0).reshape(bias.shape))
        return grads

    return _record(out, "linear_sum", parents, backward)


def cross3(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != (3,) or b.shape[-1:] != (3,):
        raise ShapeError(f"cross3: last axis must be 3, got {a.shape} and {b.shape}")
    _broadcast_shape("cross3", a, b)

    def backward(g):
        return _unbroadcast(np.cross(b.data, g), a.shape), _unbroadcast(np.cross(g, a.data), b.shape)

    return _record(np.cross(a.data, b.data), "cross3", (a, b), backward)


def norm3(a) -> Tensor:
    """Euclidean norm over a last axis of length 3. Gradient at the zero vector is taken as 0."""
    a = as_tensor(a)
    if a.shape[-1:] != (3,):
        raise ShapeError(f"norm3: last axis must be 3, got {a.shape}")
    n = np.sqrt(np.sum(a.data * a.data, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe)[..., None] * a.data * (n > 0)[..., None],)

    return _record(n, "norm3", (a,), backward)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ZeroDivisionError(f"l2_normalize: zero vector in tensor of shape {a.shape}")
    y = a.data / n

    def backward(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)

    return _record(y, "l2_normalize", (a,), backward)


# ---------------------------------------------------------------------------
# reductions and structure


def sum_over_axis(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_over_axis(a, axis, keepdims), 1.0 / count)


def max_over_axis(a, axis: int, with_argmax: bool = False):
    """Max-pool along ``axis``. Ties go to the lowest index; backward routes there."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx_k, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    res = _record(out, "max", (a,), backward)
    return (res, idx) if with_argmax else res


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat(axis={axis}): incompatible shapes {ts[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])
    lead = (slice(None),) * ax

    def backward(g):
        return tuple(g[lead + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, backward)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of shape {a.shape}")
    out, start = [], 0
    for n in sizes:
        out.append(take(a, np.arange(start, start + n), axis=ax))
        start += n
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {indices.shape}")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, ax, 0), indices, np.moveaxis(g, ax, 0))
        return (ga,)

    return _record(np.take(a.data, indices, axis=ax), "take", (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Batched row gather: ``a`` is (B, N, d), ``indices`` is (B, ...) into axis 1.

    Returns shape (B, ..., d).
    """
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    if a.ndim != 3 or indices.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: incompatible shapes {a.shape} and {indices.shape}")
    B, N, d = a.shape
    flat_idx = (indices.reshape(B, -1) + (np.arange(B) * N)[:, None]).reshape(-1)
    out = a.data.reshape(B * N, d)[flat_idx].reshape(indices.shape + (d,))
    scatter = _segment_scatter(flat_idx, B * N) if a.requires_grad else None

    def backward(g):
        return (scatter(g.reshape(-1, d)).reshape(a.shape),)

    return _record(out, "gather_rows", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from an output, in append (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.is_leaf or t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t.parents)
        return cls([seen[k] for k in sorted(seen)])


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise AutodiffError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(Graph.trace(loss).nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            elif parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------------------
# finite-difference checking


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    if np.any(np.isnan(err)):
        return float("nan")
    return float(err.max()) if err.size else 0.0


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float, coords: Iterable[int]) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    coords = list(coords)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(Tensor._wrap(x.copy())).item()
        x.flat[i] = orig - h
        fm = f(Tensor._wrap(x.copy())).item()
        x.flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6, coords=None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    data = as_tensor(point).data
    x = Tensor(data, requires_grad=True)
    backward(f(x))
    analytic = np.zeros(data.size) if x.grad is None else x.grad.reshape(-1)
    coords = range(data.size) if coords is None else coords
    coords = list(coords)
    return _rel_err(analytic[coords], numeric_grad(f, data, h, coords))


def grad_check_params(f: Callable[[dict], Tensor], params: dict[str, Tensor], h: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Run :func:`grad_check` on every tensor in ``params`` with the others held fixed.

    ``max_coords`` samples at most that many coordinates per tensor.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, p in params.items():
        def f_one(t, name=name):
            return f({**params, name: t})

        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
        results[name] = grad_check(f_one, p.data, h=h, coords=coords)
    return results
