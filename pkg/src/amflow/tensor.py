"""Small float64 tensor with a reverse-mode tape.

Only the operations the motion losses need are provided. Every op returns a new
``Tensor`` that remembers its parents and a closure that pushes the output
gradient back to them; ``backward`` walks that graph in reverse topological
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import stream

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "softmax_last_axis",
    "sum",
    "mean",
    "squared_l2",
    "position_weighted_sum",
    "reshape",
    "transpose",
    "take",
    "rms_normalize",
    "backward",
    "check_gradient",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation sees or produces NaN/inf."""


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values in tensor of shape {arr.shape}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return Tensor(data, requires_grad=False)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op, backward_fn):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward_fn
    _check_finite(out.data, op)
    return out


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcast over
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", bw)


def scale(a, c: float):
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a, b):
    """Matrix product over the last two axes (leading axes must match exactly)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), "matmul", bw)


def softmax_last_axis(t, mask=None):
    """Max-subtracted softmax over the last axis.

    ``mask`` (boolean, same shape, constant) marks the slots that take part;
    masked-out slots get probability exactly 0. Every row needs one live slot.
    """
    t = _as_tensor(t)
    x = t.data
    _check_finite(x, "softmax_last_axis input")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValueError("softmax_last_axis: a row has every slot masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (t,), "softmax", bw)


def sum(t, axis=None):  # noqa: A001 - mirrors numpy naming
    t = _as_tensor(t)
    out = t.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, t.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % t.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), t.shape).copy(),)

    return _result(out, (t,), "sum", bw)


def mean(t, axis=None):
    t = _as_tensor(t)
    n = t.data.size if axis is None else np.prod([t.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(t, axis=axis), 1.0 / n)


def squared_l2(t, axis=None):
    """Sum of squares (over ``axis`` or everything)."""
    t = _as_tensor(t)
    out = (t.data * t.data).sum(axis=axis)

    def bw(g):
        if axis is None:
            return (2.0 * g * t.data,)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % t.ndim for ax in axes)
        return (2.0 * np.expand_dims(g, axes) * t.data,)

    return _result(out, (t,), "squared_l2", bw)


def position_weighted_sum(weights, positions):
    """``sum_s weights[..., s] * positions[..., s, :]``.

    ``positions`` is a constant (ndarray) with shape ``weights.shape + (2,)``
    or ``(S, 2)``.
    """
    weights = _as_tensor(weights)
    pos = np.asarray(positions, dtype=np.float64)
    out = np.einsum("...s,...sk->...k", weights.data, np.broadcast_to(pos, weights.shape + (pos.shape[-1],)))

    def bw(g):
        full = np.broadcast_to(pos, weights.shape + (pos.shape[-1],))
        return (np.einsum("...k,...sk->...s", g, full),)

    return _result(out, (weights,), "position_weighted_sum", bw)


def reshape(t, shape):
    t = _as_tensor(t)
    return _result(t.data.reshape(shape), (t,), "reshape", lambda g: (g.reshape(t.shape),))


def transpose(t, axes):
    t = _as_tensor(t)
    inv = np.argsort(axes)
    return _result(np.transpose(t.data, axes), (t,), "transpose", lambda g: (np.transpose(g, inv),))


def take(t, index):
    """Gather rows of ``t`` along axis 0 with an integer index array of any shape."""
    t = _as_tensor(t)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros(t.shape, dtype=np.float64)
        # unbuffered scatter-add: duplicate indices accumulate
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + t.shape[1:]))
        return (out,)

    return _result(t.data[index], (t,), "take", bw)


def rms_normalize(t, eps=1e-12):
    """Scale each vector along the last axis to unit root-mean-square."""
    t = _as_tensor(t)
    x = t.data
    n = x.shape[-1]
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x / r

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True) / n) / r,)

    return _result(y, (t,), "rms_normalize", bw)


@dataclass
class Graph:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(loss, False)]
        # iterative DFS so deep tapes do not hit the recursion limit
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
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if not n._parents and n.requires_grad]


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and return ``{id(leaf): grad}``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not node._parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return {id(leaf): leaf.grad for leaf in graph.leaves()}


def check_gradient(loss_fn, x, step=1e-3, n_samples=64, seed=0, eps=1e-8):
    """Compare the tape gradient of ``loss_fn`` at ``x`` with central differences.

    ``loss_fn`` maps a leaf Tensor to a scalar Tensor; it is re-run for every
    perturbed coordinate, so the tape is rebuilt each time. At most
    ``n_samples`` coordinates are probed (seeded). Returns the max error, relative
    to ``max(|analytic|, eps)``; when the analytic gradient is exactly zero but the
    difference quotient is not, the absolute error is used for that coordinate.
    """
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    backward(loss_fn(leaf))
    analytic = leaf.grad.reshape(-1)

    size = x.size
    rng = stream(seed, "gradcheck")
    coords = np.arange(size) if size <= n_samples else np.sort(rng.choice(size, n_samples, replace=False))

    worst = 0.0
    flat = x.reshape(-1)
    for k in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[k] += step
        minus[k] -= step
        fp = loss_fn(Tensor(plus.reshape(x.shape))).item()
        fm = loss_fn(Tensor(minus.reshape(x.shape))).item()
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[k]
        if a == 0.0 and numeric != 0.0:
            err = abs(numeric)
        else:
            err = abs(a - numeric) / max(abs(a), eps)
        worst = max(worst, err)
    return worst
