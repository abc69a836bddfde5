"""Dense tensors with a reverse-mode gradient tape.

Every differentiable result keeps references to its parents and a closure
mapping the upstream gradient to one gradient per parent. ``backward`` walks
that graph in reverse topological order, visiting each node once.
"""

import contextlib
import struct

import numpy as np

from ..errors import DimensionError, UsageError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run a block without recording operations on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    # -- elementwise algebra -------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return make_result(self.data + other.data, (self, other),
                           lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __neg__(self):
        return make_result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other):
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def bw(g):
            ga = unbroadcast(g * b, a.shape) if self.requires_grad else None
            gb = unbroadcast(g * a, b.shape) if other.requires_grad else None
            return ga, gb

        return make_result(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported; multiply by its reciprocal")
        return self * (1.0 / other)

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return make_result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return make_result(np.array(self.data[idx]), (self,), bw)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def make_result(data, parents, backward_fn):
    """Wrap ``data`` as a tape node when any parent needs a gradient."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def tape_order(root):
    """Nodes reachable from ``root`` that need gradients, in topological order."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, retain_graph=False):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; callers zero them between steps.
    Unless ``retain_graph`` is set, closures are dropped as they run so the
    activations they captured are freed during the sweep.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    order = tape_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    # buffers created here may be accumulated in place; closures' outputs may alias
    owned = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        owned.discard(id(node))
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype)
            else:
                node.grad = node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in owned:
                grads[key] += pg
            elif key in grads:
                grads[key] = grads[key] + pg
                owned.add(key)
            else:
                grads[key] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()


# -- debug blobs ---------------------------------------------------------------

_HEADER = struct.Struct("<4I")


def dump_blob(arr, path):
    """Write a little-endian float64 blob prefixed by a 16-byte shape header.

    The header holds up to four uint32 dimensions, zero-padded; zero-sized
    dimensions are therefore not representable.
    """
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim > 4 or 0 in arr.shape:
        raise DimensionError(f"blob format holds rank <= 4 with nonzero dims, got {arr.shape}")
    dims = list(arr.shape) + [0] * (4 - arr.ndim)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*dims))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DimensionError(f"{path}: truncated blob header")
    dims = [d for d in _HEADER.unpack_from(raw) if d]
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != int(np.prod(dims)):
        raise DimensionError(f"{path}: header shape {dims} does not match {body.size} values")
    return body.reshape(dims).astype(np.float64)
