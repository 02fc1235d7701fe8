"""Dense tensors with reverse-mode automatic differentiation.

Small by design: row-major numpy storage, an explicit recording graph and
exactly the operations a transformer stack needs. There is no implicit
broadcasting; the few ops with non-trivial shape semantics (``matmul``
over stacked leading axes, ``add_bias`` along the last axis,
``expand_batch``) document theirs explicitly.

Recording model: operations record a node on the innermost active
:class:`Graph` whenever at least one input requires gradients. The
recording order is a topological order by construction, so the backward
pass is a single reverse sweep that touches each node exactly once.
Tensors built outside any graph (or from constants only) are plain
values. A graph can be consumed by backward only once.

Precision is a construction choice: float64 for tests and gradient
checks, float32 for training runs. Operands of one operation must share
a dtype; only python scalars mix freely.
"""

from __future__ import annotations

import warnings
import weakref
from typing import Callable, Sequence

import numpy as np

from . import backend as B
from .errors import (
    DegenerateVectorWarning,
    NumericError,
    ShapeMismatchError,
    StateError,
)

DEFAULT_DTYPE = np.float64
_NORM_EPS = 1e-12


class Tensor:
    """A dense n-dimensional array, optionally part of a recording graph.

    The graph link is weak and `node_id` is a plain index, so discarded
    graphs free their tensors by reference counting alone (no cycles).
    """

    __slots__ = ("data", "grad", "requires_grad", "_graph", "node_id", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not arr.flags["WRITEABLE"]:
            arr = arr.copy()  # kernels take writable buffers
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._graph: weakref.ref | None = None
        self.node_id: int | None = None

    @property
    def graph(self) -> "Graph | None":
        return self._graph() if self._graph is not None else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars are the only permitted mixed operands
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul_scalar(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, dtype=None) -> Tensor:
    """A constant tensor: participates in math, never in gradients."""
    return Tensor(data, dtype=dtype, requires_grad=False)


def param(data, dtype=None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, dtype=dtype, requires_grad=True)


class Node:
    """One recorded operation: inputs, output and a backward closure."""

    __slots__ = ("inputs", "out", "bwd", "index")

    def __init__(self, inputs, out, bwd, index):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd
        self.index = index


_ACTIVE: list["Graph"] = []


class Graph:
    """Ordered record of operations, consumable by one backward sweep."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> int:
        """Reverse sweep from `root`; returns the number of nodes visited.

        The recording order is topological, so one reverse pass
        propagates every gradient; each node is visited once. A second
        call without re-recording raises StateError.
        """
        if self.consumed:
            raise StateError("graph already consumed by backward; re-run the forward pass")
        if root.graph is not self:
            raise StateError("backward root was not recorded on this graph")
        if root.data.size != 1:
            raise ShapeMismatchError(f"backward root must be scalar, got shape {root.shape}")
        self.consumed = True
        root.grad = np.ones_like(root.data)
        visited = 0
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.bwd(g)
            visited += 1
        return visited


def backward(root: Tensor) -> int:
    if root.graph is None:
        raise StateError("tensor was not recorded on any graph")
    return root.graph.backward(root)


def _recording(*inputs: Tensor):
    if _ACTIVE and any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def _make(graph, inputs: tuple[Tensor, ...], data: np.ndarray, bwd) -> Tensor:
    out = Tensor(data, requires_grad=graph is not None)
    if graph is not None:
        node = Node(inputs, out, bwd, len(graph.nodes))
        graph.nodes.append(node)
        out._graph = weakref.ref(graph)
        out.node_id = node.index
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)  # owned copy; g may be shared
    else:
        t.grad += g


def _check_same_dtype(*tensors: Tensor) -> None:
    d0 = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != d0:
            raise ShapeMismatchError(f"mixed dtypes {d0} and {t.data.dtype}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "add")
    graph = _recording(a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(graph, (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "sub")
    graph = _recording(a, b)

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(graph, (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_same_shape(a, b, "mul")
    graph = _recording(a, b)

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(graph, (a, b), a.data * b.data, bwd)


def neg(a: Tensor) -> Tensor:
    graph = _recording(a)

    def bwd(g):
        _accum(a, -g)

    return _make(graph, (a,), -a.data, bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    graph = _recording(a)

    def bwd(g):
        _accum(a, g)

    return _make(graph, (a,), a.data + a.data.dtype.type(c), bwd)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    graph = _recording(a)
    cc = a.data.dtype.type(c)

    def bwd(g):
        _accum(a, g * cc)

    return _make(graph, (a,), a.data * cc, bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    graph = _recording(a)
    orig = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return _make(graph, (a,), a.data.reshape(shape), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    graph = _recording(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(np.transpose(g, inv)))

    return _make(graph, (a,), np.ascontiguousarray(np.transpose(a.data, axes)), bwd)


def transpose_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def slice_lastaxis(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeMismatchError(f"slice [{start}:{stop}] out of range for last extent {a.shape[-1]}")
    graph = _recording(a)

    def bwd(g):
        z = np.zeros_like(a.data)
        z[..., start:stop] = g
        _accum(a, z)

    return _make(graph, (a,), np.ascontiguousarray(a.data[..., start:stop]), bwd)


def concat_lastaxis(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    _check_same_dtype(*parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatchError(f"concat: leading shapes {lead} and {p.shape[:-1]} differ")
    graph = _recording(*parts)
    widths = [p.shape[-1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., off : off + w])
            off += w

    return _make(graph, parts, np.concatenate([p.data for p in parts], axis=-1), bwd)


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Tile `a` along a new leading axis of extent n; grad sums it back."""
    graph = _recording(a)

    def bwd(g):
        _accum(a, g.sum(axis=0))

    data = np.ascontiguousarray(np.broadcast_to(a.data, (n,) + a.data.shape))
    return _make(graph, (a,), data, bwd)


# ---------------------------------------------------------------------------
# matmul and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported forms: (..., m, k) @ (k, n) with the 2-D operand applied to
    every leading slice, and (..., m, k) @ (..., k, n) with identical
    leading extents. Anything else is a shape error.
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul: leading extents differ for shapes {a.shape} and {b.shape}")
    graph = _recording(a, b)
    k = a.shape[-1]
    n = b.shape[-1]

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                a2 = a.data.reshape(-1, k)
                g2 = g.reshape(-1, n)
                _accum(b, a2.T @ g2)
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(graph, (a, b), a.data @ b.data, bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b a vector along the last axis of x."""
    _check_same_dtype(x, b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeMismatchError(f"bias shape {b.shape} does not match last extent of {x.shape}")
    graph = _recording(x, b)

    def bwd(g):
        _accum(x, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(graph, (x, b), x.data + b.data, bwd)


def sum_all(a: Tensor) -> Tensor:
    graph = _recording(a)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(graph, (a,), np.asarray(a.data.sum(), dtype=a.data.dtype), bwd)


def mean_all(a: Tensor) -> Tensor:
    return mul_scalar(sum_all(a), 1.0 / a.size)


def sum_lastaxis(a: Tensor) -> Tensor:
    graph = _recording(a)

    def bwd(g):
        _accum(a, np.broadcast_to(g[..., None], a.data.shape))

    return _make(graph, (a,), a.data.sum(axis=-1), bwd)


# ---------------------------------------------------------------------------
# nonlinear kernels (dispatched to the active backend)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max subtraction."""
    ax = axis % x.ndim
    last = x.ndim - 1
    graph = _recording(x)

    xm = x.data if ax == last else np.ascontiguousarray(np.moveaxis(x.data, ax, last))
    shp = xm.shape
    y2 = B.softmax_forward(xm.reshape(-1, shp[-1]))
    y = y2.reshape(shp)
    out_data = y if ax == last else np.ascontiguousarray(np.moveaxis(y, last, ax))

    def bwd(g):
        gm = g if ax == last else np.ascontiguousarray(np.moveaxis(g, ax, last))
        dx = B.softmax_backward(gm.reshape(-1, shp[-1]), y2).reshape(shp)
        if ax != last:
            dx = np.ascontiguousarray(np.moveaxis(dx, last, ax))
        _accum(x, dx)

    return _make(graph, (x,), out_data, bwd)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by an affine map."""
    _check_same_dtype(x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match last extent {c}"
        )
    graph = _recording(x, gamma, beta)
    x2 = x.data.reshape(-1, c)
    y2, xhat, rstd = B.layernorm_forward(x2, gamma.data, beta.data, eps)

    def bwd(g):
        dx, dgamma, dbeta = B.layernorm_backward(g.reshape(-1, c), xhat, rstd, gamma.data)
        _accum(x, dx.reshape(x.data.shape))
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _make(graph, (x, gamma, beta), y2.reshape(x.data.shape), bwd)


def gelu(x: Tensor) -> Tensor:
    graph = _recording(x)
    flat = x.data.reshape(-1)
    y, cdf = B.gelu_forward(flat)

    def bwd(g):
        _accum(x, B.gelu_backward(g.reshape(-1), flat, cdf).reshape(x.data.shape))

    return _make(graph, (x,), y.reshape(x.data.shape), bwd)


def normalize_lastaxis(x: Tensor) -> Tensor:
    """Scale each last-axis vector to unit length.

    Vectors with norm below 1e-12 map to zero and get zero gradient, so a
    downstream `1 - dot` cosine distance lands on 1.0 for them.
    """
    graph = _recording(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    degenerate = n < _NORM_EPS
    ng = np.where(degenerate, x.data.dtype.type(1.0), n)
    y = np.where(degenerate, x.data.dtype.type(0.0), x.data / ng)

    def bwd(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        gx = (g - y * dot) / ng
        if degenerate.any():
            gx = np.where(degenerate, 0.0, gx)
        _accum(x, gx)

    return _make(graph, (x,), y, bwd)


def cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """1 - cos(u, v) for flat vectors, in [0, 2].

    If either norm is below 1e-12 the distance is defined as 1.0 (maximal
    uncertainty), a DegenerateVectorWarning is emitted and no gradient
    flows.
    """
    _check_same_dtype(u, v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(f"cosine_distance needs equal-length vectors, got {u.shape} and {v.shape}")
    graph = _recording(u, v)
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu < _NORM_EPS or nv < _NORM_EPS:
        warnings.warn("zero-norm vector in cosine distance; returning 1.0", DegenerateVectorWarning)

        def bwd_degen(g):
            pass

        return _make(graph, (u, v), np.asarray(1.0, dtype=u.data.dtype), bwd_degen)
    cos = float(u.data @ v.data) / (nu * nv)

    def bwd(g):
        gs = float(g)
        _accum(u, -gs * (v.data / (nu * nv) - cos * u.data / (nu * nu)))
        _accum(v, -gs * (u.data / (nu * nv) - cos * v.data / (nv * nv)))

    return _make(graph, (u, v), np.asarray(1.0 - cos, dtype=u.data.dtype), bwd)


def stop_grad(x: Tensor) -> Tensor:
    """Same forward value, no gradient path. Shares the data buffer."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst relative error between recorded and central-difference grads.

    `f` must map `x` to a scalar tensor and be deterministic. `x` should
    be float64; float32 inputs make the difference quotient too noisy for
    tight tolerances. Coordinates where both gradients are below 1e-6 are
    compared absolutely against that floor.
    """
    if not x.requires_grad:
        raise StateError("grad_check target must require gradients")
    x.grad = None
    with Graph() as g:
        out = f(x)
    if out.size != 1:
        raise ShapeMismatchError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    g.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("non-finite values during gradient check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
