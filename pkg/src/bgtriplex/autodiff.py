"""Dense float64 tensors with reverse-mode gradients.

Covers exactly the operations the expression model needs: matrix
multiplication, row-wise softmax (optionally column-masked), layer
normalization, elementwise arithmetic, concatenation, masked row pooling
and row selection. Gradients are accumulated by walking the recorded
operation graph in reverse topological order; all reductions run in
numpy's deterministic order so repeated runs are bit-identical.
"""

from __future__ import annotations

import numbers

import numpy as np

from .errors import DegenerateAttentionError, NumericsError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "compose",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "softmax_rows",
    "layer_norm",
    "concat_cols",
    "concat_rows",
    "mean_rows",
    "mean_all",
    "row",
    "grad_check",
]


class Tensor:
    """A row-major float64 array with an optional gradient buffer.

    Tensors are treated as immutable after construction; operations
    return new tensors. A tensor created with ``requires_grad=True`` (or
    derived from one) participates in ``backward()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if type(data) is np.ndarray and data.dtype == np.float64 and data.flags.c_contiguous:
            self.data = data
        else:
            self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``grad`` buffer."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # Operator sugar; the module-level functions carry the contracts.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value):
    if type(value) is Tensor or isinstance(value, Tensor):
        return value
    if isinstance(value, numbers.Number):
        return Tensor(np.float64(value))
    return Tensor(value)


def compose(data, parents, backward):
    """Build an op output wired into the graph.

    ``backward`` is called with the output's gradient and must accumulate
    into the parents itself. Used by operations with hand-derived
    backward passes (e.g. the grid convolution of the positional encoder).
    """
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = lambda: backward(out.grad)
    return out


def _topo_order(root):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    """Matrix product of two 2-D tensors; dA = dC @ B^T, dB = A^T @ dC."""
    if type(a) is not Tensor:
        a = as_tensor(a)
    if type(b) is not Tensor:
        b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        out._backward = backward
    return out


def matmul_nt(a, b):
    """a @ b.T without materializing the transpose node."""
    if type(a) is not Tensor:
        a = as_tensor(a)
    if type(b) is not Tensor:
        b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt: incompatible shapes {a.shape} x {b.shape}^T")
    out = Tensor(a.data @ b.data.T)
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data)
            if b.requires_grad:
                b._accumulate(g.T @ a.data)

        out._backward = backward
    return out


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-D tensor, got shape {x.shape}")
    out = Tensor(x.data.T)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda: x._accumulate(out.grad.T)
    return out


def _accum_shaped(tensor, g):
    if g.shape != tensor.data.shape:
        g = _sum_to_shape(g, tensor.data.shape)
    tensor._accumulate(g)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def backward():
            g = out.grad
            if a.requires_grad:
                _accum_shaped(a, g)
            if b.requires_grad:
                _accum_shaped(b, g)

        out._backward = backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def backward():
            g = out.grad
            if a.requires_grad:
                _accum_shaped(a, g)
            if b.requires_grad:
                _accum_shaped(b, -g)

        out._backward = backward
    return out


def mul(a, b):
    if isinstance(b, numbers.Number) and isinstance(a, Tensor):
        scale = float(b)
        out = Tensor(a.data * scale)
        if a.requires_grad:
            out.requires_grad = True
            out._parents = (a,)
            out._backward = lambda: a._accumulate(out.grad * scale)
        return out
    if isinstance(a, numbers.Number):
        return mul(as_tensor(b), a)
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc
    if a.requires_grad or b.requires_grad:
        out.requires_grad = True
        out._parents = (a, b)

        def backward():
            g = out.grad
            if a.requires_grad:
                _accum_shaped(a, g * b.data)
            if b.requires_grad:
                _accum_shaped(b, g * a.data)

        out._backward = backward
    return out


def softmax_rows(x, col_mask=None):
    """Row-wise softmax with per-row max subtraction.

    ``col_mask`` marks key/value columns that may receive weight; masked
    columns have their logits forced to -inf and end up with exactly zero
    weight. Raises if every column is masked.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: need a 2-D tensor, got shape {x.shape}")
    z = x.data
    if col_mask is not None:
        mask = np.asarray(col_mask, dtype=bool).reshape(-1)
        if mask.shape[0] != x.shape[1]:
            raise ShapeError(f"softmax_rows: mask length {mask.shape[0]} != columns {x.shape[1]}")
        if not mask.any():
            raise DegenerateAttentionError("softmax_rows: every column is masked")
        z = np.where(mask, z, -np.inf)
    peak = z.max(axis=1, keepdims=True)
    e = np.exp(z - peak)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward():
            g = out.grad
            dot = (g * s).sum(axis=1, keepdims=True)
            x._accumulate(s * (g - dot))

        out._backward = backward
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row normalization: (x - mean) / sqrt(var + eps) * gamma + beta."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: need a 2-D tensor, got shape {x.shape}")
    n = x.shape[1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    if x.requires_grad or gamma.requires_grad or beta.requires_grad:
        out.requires_grad = True
        out._parents = (x, gamma, beta)

        def backward():
            g = out.grad
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                mean_gx = gx.mean(axis=1, keepdims=True)
                mean_gx_xhat = (gx * xhat).mean(axis=1, keepdims=True)
                x._accumulate(inv * (gx - mean_gx - xhat * mean_gx_xhat))

        out._backward = backward
    return out


def _concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat: need 2-D tensors, got shape {p.shape}")
    other = 1 - axis
    extent = parts[0].shape[other]
    if any(p.shape[other] != extent for p in parts):
        raise ShapeError(f"concat: mismatched extents {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    if any(p.requires_grad for p in parts):
        out.requires_grad = True
        out._parents = tuple(parts)

        def backward():
            g = out.grad
            offset = 0
            for p in parts:
                width = p.shape[axis]
                piece = g[:, offset:offset + width] if axis == 1 else g[offset:offset + width, :]
                if p.requires_grad:
                    p._accumulate(piece)
                offset += width

        out._backward = backward
    return out


def concat_cols(parts):
    """Concatenate 2-D tensors along columns (head concatenation)."""
    return _concat(parts, axis=1)


def concat_rows(parts):
    """Concatenate 2-D tensors along rows (token-sequence assembly)."""
    return _concat(parts, axis=0)


def mean_rows(x, row_mask=None):
    """Mean over (optionally masked) rows, returned as a 1 x n tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: need a 2-D tensor, got shape {x.shape}")
    if row_mask is None:
        count = x.shape[0]
        out = Tensor(x.data.sum(axis=0, keepdims=True) / count)
        if x.requires_grad:
            out.requires_grad = True
            out._parents = (x,)
            out._backward = lambda: x._accumulate(
                np.broadcast_to(out.grad / count, x.data.shape))
        return out
    mask = np.asarray(row_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != x.shape[0]:
        raise ShapeError(f"mean_rows: mask length {mask.shape[0]} != rows {x.shape[0]}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mean_rows: every row is masked")
    out = Tensor(x.data[mask].sum(axis=0, keepdims=True) / count)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward():
            g = np.zeros_like(x.data)
            g[mask] = out.grad / count
            x._accumulate(g)

        out._backward = backward
    return out


def mean_all(x):
    """Mean over every entry, returned as a scalar (0-d) tensor."""
    x = as_tensor(x)
    out = Tensor(x.data.mean())
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda: x._accumulate(np.full_like(x.data, out.grad / x.data.size))
    return out


def row(x, index):
    """Select one row as a 1 x n tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"row: need a 2-D tensor, got shape {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ValueError(f"row: index {index} out of range for {x.shape[0]} rows")
    out = Tensor(x.data[index:index + 1, :])
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward():
            g = np.zeros_like(x.data)
            g[index] = out.grad[0]
            x._accumulate(g)

        out._backward = backward
    return out


def grad_check(f, x, h=1e-5):
    """Compare analytic gradients of a scalar map against central differences.

    ``f`` maps the tensor ``x`` (which must require gradients) to a scalar
    tensor; ``x.data`` is perturbed in place coordinate by coordinate and
    restored. Returns max over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"grad_check: h must lie in [1e-7, 1e-3], got {h}")
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ValueError("grad_check: x must be a Tensor with requires_grad=True")

    def evaluate():
        out = f(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ShapeError("grad_check: f must return a scalar tensor")
        if not np.isfinite(out.data).all():
            raise NumericsError("grad_check: f(x) is not finite")
        return out

    out = evaluate()
    x.zero_grad()
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = evaluate().item()
        flat[i] = orig - h
        f_minus = evaluate().item()
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max())
