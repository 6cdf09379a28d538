"""Dense float64 tensors with reverse-mode differentiation.

Only the handful of primitives the latent flow prior, the decoder and the
variational encoder need: matmul, broadcasting add/sub/mul, tanh, leaky-ReLU,
exp, log, square, sum, masked sum, and column gather/scatter for coupling
splits. Every op checks its output for NaN/Inf and raises
:class:`NumericFailure` instead of letting them propagate.
"""
import numpy as np

from ..errors import ContractError, NumericFailure

LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op, data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NumericFailure(op)
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _result("sub", a.data - b.data, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g, needs: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _result("mul", a.data * b.data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ContractError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ b.data.T
        if needs[1]:
            if a.ndim == 1:
                gb = np.multiply.outer(a.data, g)
            else:
                gb = a.data.T @ g
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), bw)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g, needs: (g * (1.0 - y * y),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)
    return _result("leaky_relu", y, (a,), lambda g, needs: (np.where(pos, g, slope * g),))


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g, needs: (g * y,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result("log", y, (a,), lambda g, needs: (g / a.data,))


def square(a):
    a = as_tensor(a)
    return _result("square", a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.sum(a.data, axis=axis), (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def masked_sum(a, mask, axis=None):
    """sum(a * mask) with a constant 0/1 mask."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    shape = a.shape

    def bw(g, needs):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) * m,)

    return _result("masked_sum", np.sum(a.data * m, axis=axis), (a,), bw)


def take_cols(a, idx):
    """Select columns ``idx`` of a 2-D tensor (constant index)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g, needs):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _result("take_cols", a.data[:, idx], (a,), bw)


def place_cols(parts, index_sets, width):
    """Inverse of :func:`take_cols`: scatter parts into disjoint column sets."""
    parts = tuple(as_tensor(p) for p in parts)
    index_sets = [np.asarray(ix, dtype=np.intp) for ix in index_sets]
    n = parts[0].shape[0]
    out = np.empty((n, width))
    for p, ix in zip(parts, index_sets):
        out[:, ix] = p.data

    def bw(g, needs):
        return tuple(g[:, ix] if need else None for ix, need in zip(index_sets, needs))

    return _result("place_cols", out, parts, bw)


def soft_clamp(a, bound):
    """bound * tanh(a / bound): smooth, |output| < bound."""
    return mul(tanh(mul(a, 1.0 / bound)), bound)


# --------------------------------------------------------------------------
# graph traversal


def _topo(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _check_root(root):
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")


def _propagate(root, order, needs_of, sink):
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"backward through {node._op}")
        sink(node, g)
        if not node._parents:
            continue
        needs = needs_of(node)
        if not any(needs):
            continue
        for p, gp, need in zip(node._parents, node._backward(g, needs), needs):
            if not need or gp is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    _check_root(root)
    if not root.requires_grad:
        return

    def needs_of(node):
        return [p.requires_grad for p in node._parents]

    def sink(node, g):
        if node._parents or not node.requires_grad:
            return
        g = np.reshape(g, node.shape)
        node.grad = g.copy() if node.grad is None else node.grad + g

    _propagate(root, _topo(root), needs_of, sink)


def grad(root, wrt):
    """Gradients of ``root`` w.r.t. the tensors in ``wrt``; ``.grad`` untouched.

    Only the part of the graph that leads to ``wrt`` is differentiated, so
    asking for the input gradient skips every parameter gradient.
    """
    _check_root(root)
    wrt = list(wrt)
    targets = {id(t) for t in wrt}
    out = {id(t): np.zeros(t.shape) for t in wrt}
    if not root.requires_grad:
        return [out[id(t)] for t in wrt]
    order = _topo(root)
    reach = {}
    for node in order:
        reach[id(node)] = id(node) in targets or any(reach.get(id(p), False) for p in node._parents)

    def needs_of(node):
        return [reach[id(p)] for p in node._parents]

    def sink(node, g):
        if id(node) in targets:
            out[id(node)] = out[id(node)] + np.reshape(g, node.shape)

    _propagate(root, order, needs_of, sink)
    return [out[id(t)] for t in wrt]
