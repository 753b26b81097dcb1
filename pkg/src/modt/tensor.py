"""Dense float64 tensor with tape-based reverse-mode automatic differentiation.

Every model computation in this package runs through :class:`Tensor`, so each
operation's gradient is machine-checkable against :func:`finite_difference_grad`.
Storage is row-major and flat (numpy under the hood); slices copy, and the only
broadcasting supported is scalar-with-tensor plus the explicit row-vector add.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    Operations build an implicit tape: each result keeps references to its
    parents and a backward closure, recorded in topological order by
    construction. ``backward`` on a scalar replays the closures in reverse to
    populate ``grad`` on every tensor with ``requires_grad``. Graphs from
    unrelated computations never interact.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # ------------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Copy of the data with no tape history."""
        return Tensor(self.data.copy())

    def numpy(self):
        """Read-only view of the underlying array (do not mutate)."""
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # --------------------------------------------------------------- tape glue

    @staticmethod
    def _from_op(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def _accum(t, g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64)
            else:
                t.grad = t.grad + g

    def backward(self):
        """Populate ``grad`` on every ``requires_grad`` tensor reachable from here.

        The loss must be scalar. Interior gradients are transient; leaf
        gradients accumulate across calls until ``zero_grad``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------- arithmetic

    @staticmethod
    def _coerce(x):
        if isinstance(x, Tensor):
            return x
        return Tensor(x)

    def __add__(self, other):
        return add(self, Tensor._coerce(other))

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._from_op(-self.data, (self,), None)
        if out.requires_grad:
            out._backward = lambda g: Tensor._accum(self, -g)
        return out

    def __sub__(self, other):
        return add(self, -Tensor._coerce(other))

    def __rsub__(self, other):
        return add(-self, Tensor._coerce(other))

    def __mul__(self, other):
        return mul(self, Tensor._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, Tensor._coerce(other))

    def __rtruediv__(self, other):
        return div(Tensor._coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = np.array(self.data[idx], dtype=np.float64)

        def bwd(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, idx, g)
            Tensor._accum(self, gx)

        return Tensor._from_op(data, (self,), bwd)

    # ------------------------------------------------------------ shape moves

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape).copy()
        orig = self.data.shape

        def bwd(g):
            Tensor._accum(self, g.reshape(orig))

        return Tensor._from_op(data, (self,), bwd)

    def transpose(self):
        if self.data.ndim != 2:
            raise ValueError(f"transpose supports 2-D only, got shape {self.shape}")
        data = self.data.T.copy()

        def bwd(g):
            Tensor._accum(self, g.T)

        return Tensor._from_op(data, (self,), bwd)

    @property
    def T(self):
        return self.transpose()

    # ------------------------------------------------------------- reductions

    def sum(self, axis=None):
        data = np.array(self.data.sum(axis=axis), dtype=np.float64)
        shape = self.data.shape

        def bwd(g):
            if axis is None:
                Tensor._accum(self, np.broadcast_to(g, shape).copy())
            else:
                Tensor._accum(self, np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Tensor._from_op(data, (self,), bwd)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _binary_shapes(a, b, name):
    # scalar-with-tensor is the one permitted broadcast
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"shape mismatch for {name}: {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    # undo scalar broadcasting
    if g.shape != shape:
        return np.array(g.sum(), dtype=np.float64).reshape(shape)
    return g


def add(a, b):
    _binary_shapes(a, b, "add")
    data = a.data + b.data

    def bwd(g):
        Tensor._accum(a, _reduce_to(g, a.data.shape))
        Tensor._accum(b, _reduce_to(g, b.data.shape))

    return Tensor._from_op(data, (a, b), bwd)


def mul(a, b):
    _binary_shapes(a, b, "mul")
    data = a.data * b.data

    def bwd(g):
        Tensor._accum(a, _reduce_to(g * b.data, a.data.shape))
        Tensor._accum(b, _reduce_to(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), bwd)


def div(a, b):
    _binary_shapes(a, b, "div")
    data = a.data / b.data

    def bwd(g):
        Tensor._accum(a, _reduce_to(g / b.data, a.data.shape))
        Tensor._accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._from_op(data, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar."""
    return mul(a, Tensor(float(s)))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul requires 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        Tensor._accum(a, g @ b.data.T)
        Tensor._accum(b, a.data.T @ g)

    return Tensor._from_op(data, (a, b), bwd)


def bmm(a, b):
    """Batched matrix multiply: B x M x K @ B x K x N -> B x M x N."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"bmm requires 3-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ValueError(f"shape mismatch for bmm: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        Tensor._accum(a, g @ b.data.swapaxes(1, 2))
        Tensor._accum(b, a.data.swapaxes(1, 2) @ g)

    return Tensor._from_op(data, (a, b), bwd)


def permute(x, axes):
    """Reorder axes; the N-D generalization of 2-D transpose."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ValueError(f"bad permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)  # view; all ops treat .data as read-only

    def bwd(g):
        Tensor._accum(x, g.transpose(inv))

    return Tensor._from_op(data, (x,), bwd)


def add_rowvec(x, v):
    """Add a length-D vector to every row of an L x D matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.data.shape[1] != v.data.shape[0]:
        raise ValueError(f"shape mismatch for add_rowvec: {x.data.shape} vs {v.data.shape}")
    data = x.data + v.data[None, :]

    def bwd(g):
        Tensor._accum(x, g)
        Tensor._accum(v, g.sum(axis=0))

    return Tensor._from_op(data, (x, v), bwd)


def relu(x):
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        Tensor._accum(x, g * (x.data > 0))

    return Tensor._from_op(data, (x,), bwd)


def sigmoid(x):
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bwd(g):
        Tensor._accum(x, g * data * (1.0 - data))

    return Tensor._from_op(data, (x,), bwd)


def exp(x):
    data = np.exp(x.data)

    def bwd(g):
        Tensor._accum(x, g * data)

    return Tensor._from_op(data, (x,), bwd)


def log(x):
    data = np.log(x.data)

    def bwd(g):
        Tensor._accum(x, g / x.data)

    return Tensor._from_op(data, (x,), bwd)


def absolute(x):
    data = np.abs(x.data)

    def bwd(g):
        Tensor._accum(x, g * np.sign(x.data))

    return Tensor._from_op(data, (x,), bwd)


def maximum(a, b):
    _binary_shapes(a, b, "maximum")
    data = np.maximum(a.data, b.data)

    def bwd(g):
        m = a.data >= b.data
        Tensor._accum(a, _reduce_to(g * m, a.data.shape))
        Tensor._accum(b, _reduce_to(g * ~m, b.data.shape))

    return Tensor._from_op(data, (a, b), bwd)


def minimum(a, b):
    _binary_shapes(a, b, "minimum")
    data = np.minimum(a.data, b.data)

    def bwd(g):
        m = a.data <= b.data
        Tensor._accum(a, _reduce_to(g * m, a.data.shape))
        Tensor._accum(b, _reduce_to(g * ~m, b.data.shape))

    return Tensor._from_op(data, (a, b), bwd)


def softmax(x, axis):
    """Numerically stable softmax; slices along ``axis`` sum to 1."""
    if axis >= x.data.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        Tensor._accum(x, data * (g - dot))

    return Tensor._from_op(data, (x,), bwd)


def log_softmax(x, axis):
    if axis >= x.data.ndim:
        raise ValueError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bwd(g):
        Tensor._accum(x, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            Tensor._accum(t, g[tuple(idx)])

    return Tensor._from_op(data, tuple(tensors), bwd)


def gather_rows(table, idx):
    """Row gather from a V x D table; backward scatter-adds into the rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"index out of range for table with {table.data.shape[0]} rows: {idx}")
    data = table.data[idx].copy()

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        Tensor._accum(table, gt)

    return Tensor._from_op(data, (table,), bwd)


def finite_difference_grad(f, x, eps=1e-6):
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    The oracle against which every backward rule is checked; it never touches
    the tape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bump = np.zeros_like(base).reshape(-1)
        bump[i] = eps
        bump = bump.reshape(base.shape)
        hi = f(Tensor(base + bump))
        lo = f(Tensor(base - bump))
        hi = hi.item() if isinstance(hi, Tensor) else float(hi)
        lo = lo.item() if isinstance(lo, Tensor) else float(lo)
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad
