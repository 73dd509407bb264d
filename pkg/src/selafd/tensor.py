"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float64 array plus an optional gradient buffer.
Every differentiable operation records a Node (op name, parent tensors,
backward closure); backward() on a scalar loss topologically sorts the
recorded nodes and walks them once in reverse, accumulating gradients
into the `.grad` buffer of every requires_grad leaf.

Scope is deliberately small: rank <= 4 arrays, broadcasting limited to
trailing-aligned addition (row-vector bias and batch-shared addends),
matmul over the last two axes with optionally stacked leading dims.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, ShapeMismatch

Array = np.ndarray


class Node:
    """One recorded primitive op: how to push gradient back to its parents."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...],
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaves are created directly; op results carry a Node linking them to
    their parents. A tensor with requires_grad=False never accumulates
    gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Convenience operators; the function forms below are the primary API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__


def _result(data: Array, op: str, parents: tuple[Tensor, ...],
            backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    """Wrap an op result, recording a Node only if some parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; every node's inputs precede it."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from `loss`.

    Deterministic: graph construction order fixes the traversal order,
    so identical runs accumulate gradients in an identical order.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None or t.node is None:
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                # requires_grad leaf: accumulate into its buffer
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg
            else:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _sum_to_shape(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient over the leading axes added by trailing broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may be trailing-aligned (bias row, shared addend)."""
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ShapeMismatch(f"add: cannot align {a.shape} with {b.shape}")
    data = a.data + b.data

    def bwd(g: Array):
        return g, _sum_to_shape(g, b.shape)

    return _result(data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g: Array):
        return (g * c,)

    return _result(a.data * c, "scale", (a,), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: shape {a.shape} != shape {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g: Array):
        return g * bd, g * ad

    return _result(ad * bd, "mul", (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports (m,k)@(k,n), stacked (...,m,k)@(...,k,n) with identical leading
    dims, and stacked-by-plain (...,m,k)@(k,n) where the weight gradient sums
    over the stack.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul requires rank >= 2, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeMismatch(f"matmul: leading dims disagree, {a.shape} @ {b.shape}")
    data = ad @ bd

    def bwd(g: Array):
        ga = g @ bd.swapaxes(-1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _result(data, "matmul", (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w stored (out_features, in_features)."""
    xd, wd = x.data, w.data
    if wd.ndim != 2:
        raise ShapeMismatch(f"linear weight must be rank 2, got {w.shape}")
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {w.shape}")
    data = xd @ wd.T
    if b is not None:
        data = data + b.data

    def bwd(g: Array):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, _sum_to_shape(g, b.shape)

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, "linear", parents, bwd)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose requires rank >= 2, got {a.shape}")

    def bwd(g: Array):
        return (g.swapaxes(-1, -2),)

    return _result(a.data.swapaxes(-1, -2), "transpose", (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape

    def bwd(g: Array):
        return (g.reshape(old),)

    return _result(a.data.reshape(tuple(shape)), "reshape", (a,), bwd)


def moveaxis(a: Tensor, source: int, dest: int) -> Tensor:
    def bwd(g: Array):
        return (np.moveaxis(g, dest, source),)

    return _result(np.moveaxis(a.data, source, dest), "moveaxis", (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx_t = tuple(idx)

    def bwd(g: Array):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx_t] = g
        return (full,)

    return _result(a.data[idx_t].copy(), "narrow", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    sizes = [t.shape[axis] for t in ts]
    data = np.concatenate([t.data for t in ts], axis=axis)

    def bwd(g: Array):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _result(data, "concat", tuple(ts), bwd)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis; gradient sums back over it."""
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def bwd(g: Array):
        return (g.sum(axis=0),)

    return _result(data, "tile_leading", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g: Array):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), "relu", (a,), bwd)


GELU_C0 = 0.7978845608   # sqrt(2/pi)
GELU_C1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU used by the transformer MLP."""
    x = a.data
    inner = GELU_C0 * (x + GELU_C1 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g: Array):
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _result(data, "gelu", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax: max is subtracted before exponentiation."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: Array):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, "softmax", (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    data = xhat * gamma.data + beta.data

    def bwd(g: Array):
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _result(data, "layer_norm", (x, gamma, beta), bwd)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all entries; the canonical scalar reducer."""
    shape = a.shape

    def bwd(g: Array):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum()), "sum", (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    return scale(tensor_sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def zeros(shape: Iterable[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def trunc_normal(shape: Iterable[int], rng: np.random.Generator,
                 std: float = 0.02, requires_grad: bool = True) -> Tensor:
    """Normal(0, std) clipped to +-2 std; the backbone init convention."""
    data = np.clip(rng.normal(0.0, std, tuple(shape)), -2.0 * std, 2.0 * std)
    return Tensor(data, requires_grad=requires_grad)
