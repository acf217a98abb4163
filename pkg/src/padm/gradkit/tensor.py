"""Tensor type and the backward pass."""

from __future__ import annotations

import contextlib

import numpy as np

from padm import NonFiniteError

_FLOAT_DTYPES = (np.float32, np.float64)

# module-level switches; the context managers below restore them
_grad_enabled = True
_finite_check = True


def set_finite_check(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every op output."""
    global _finite_check
    _finite_check = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array with a gradient slot and a link to its graph node.

    ``grad`` stays None until a backward pass deposits into it; repeated
    backward calls without zeroing accumulate additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) into every reachable grad slot."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        local = {id(self): np.ones_like(self.data)}
        for node in order:
            g = local.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._grad_fn is None:
                # leaf: deposit into the persistent slot
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._grad_fn is None:
                continue
            parent_grads = node._grad_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = local.get(id(parent))
                local[id(parent)] = np.array(pg) if prev is None else prev + pg

    # operator sugar; the heavy lifting lives in ops.py
    def __add__(self, other):
        from padm.gradkit.ops import add

        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from padm.gradkit.ops import sub

        return sub(self, other)

    def __rsub__(self, other):
        from padm.gradkit.ops import sub

        return sub(other, self)

    def __mul__(self, other):
        from padm.gradkit.ops import mul

        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from padm.gradkit.ops import neg

        return neg(self)

    def __matmul__(self, other):
        from padm.gradkit.ops import matmul

        return matmul(self, other)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def constant(x, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, grad_fn) -> Tensor:
    """Assemble an op output, guarding against non-finite values."""
    if _finite_check and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced NaN or Inf")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def fd_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar-valued fn, in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
