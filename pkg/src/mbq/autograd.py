"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers the
:class:`Node` which produced it.  :func:`backward` linearises the graph into a
:class:`GradientTape` (inputs always precede outputs) and walks it once in
reverse, accumulating vector-Jacobian products.

Payloads are 32-bit floats.  Reductions (sums, means, batch statistics, the
loss) accumulate in 64-bit and narrow on output.  The working dtype can be
widened with :func:`precision` (used by finite-difference oracles).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

_DTYPE = np.dtype(np.float32)
_RECORDING = True

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy a primitive's shape rule."""

    def __init__(self, primitive: str, detail: str):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive
        self.detail = detail


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working float type (e.g. to float64)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]
    output: Optional["Tensor"] = None


class Tensor:
    """Dense array with an optional gradient slot.

    Tensors hash by identity so they can key gradient maps.
    """

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar():
    raise ValueError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if _RECORDING and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, vjp)
        out._node = node
    return out


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = _sum64(g, axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = _sum64(g, axis=axes, keepdims=True)
    return g.astype(_DTYPE).reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


@dataclass
class GradientTape:
    """Nodes in topological order; every node's inputs precede it."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradientTape":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                node.output = t
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in node.inputs:
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))
        return cls(order)


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``grad`` accumulated and are
    returned as a ``{tensor: grad}`` map.  The graph is released afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = GradientTape.from_output(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    leaves: dict = {}
    if loss._node is None:
        leaves[loss] = grads[id(loss)]
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        g_in = node.vjp(g_out)
        for inp, g in zip(node.inputs, g_in):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp._node is None:
                leaves[inp] = None
    out = {}
    for leaf in leaves:
        g = np.asarray(grads.get(id(leaf), leaves[leaf]), dtype=_DTYPE).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    for node in tape.nodes:
        node.output._node = None
        node.output = None
    return out


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", f"cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", f"cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * data, b.shape)

    return _make(data, "div", (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(_DTYPE), "relu", (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _make(y, "sqrt", (x,), lambda g: (g / (2 * y),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where lo <= x <= hi."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * inside,))


def ste_round(x: Tensor) -> Tensor:
    """Round half to even; identity Jacobian on the way back."""
    return _make(np.round(x.data), "ste_round", (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    data = _sum64(x.data, axis=axes, keepdims=keepdims).astype(_DTYPE)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(_DTYPE),)

    return _make(data, "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = (_sum64(x.data, axis=axes, keepdims=keepdims) / n).astype(_DTYPE)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).astype(_DTYPE),)

    return _make(data, "mean", (x,), vjp)


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (divide-by-N) variance."""
    centered = x - mean(x, axis=axis, keepdims=True)
    return mean(centered * centered, axis=axis, keepdims=keepdims)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; the gradient goes to the first maximal entry."""
    axes = _norm_axes(axis, x.ndim)
    data = np.max(x.data, axis=axes, keepdims=True)
    mask = x.data == data
    # keep only the first hit so the gradient is not split across ties
    flat = mask.reshape(-1)
    if axes == tuple(range(x.ndim)):
        first = np.zeros_like(flat)
        first[np.argmax(flat)] = True
        mask = first.reshape(x.shape)
    out = data if keepdims else np.squeeze(data, axis=axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.where(mask, g, 0).astype(_DTYPE),)

    return _make(out, "max", (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(data, "reshape", (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, "matmul", (a, b), vjp)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` with ``w`` stored as (out_features, in_features)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    data = x.data @ w.data.T

    def vjp(g):
        return g @ w.data, g.T @ x.data

    return _make(data, "linear", (x, w), vjp)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError("bias_add", f"bias {b.shape} does not match channel axis of {x.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    data = x.data + b.data.reshape(shape)
    red = (0,) + tuple(range(2, x.ndim))

    def vjp(g):
        return g, _sum64(g, axis=red).astype(_DTYPE)

    return _make(data, "bias_add", (x, b), vjp)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input, (O, C, kh, kw) weight, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", f"input channels {c} != weight channels {cw}")
    if stride not in (1, 2):
        raise ShapeError("conv2d", f"stride must be 1 or 2, got {stride}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> rows of patches
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        # (kh, kw, n, c, ho, wo) so each tap is one contiguous block
        gcols = np.ascontiguousarray((g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        return gx, gw

    return _make(out, "conv2d", (x, w), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    data = (_sum64(x.data, axis=(2, 3)) / (h * w)).astype(_DTYPE)

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(_DTYPE),)

    return _make(data, "global_avg_pool", (x,), vjp)


def batch_stats(x: np.ndarray) -> tuple:
    """Per-channel population mean and variance (64-bit accumulation)."""
    axes = (0,) + tuple(range(2, x.ndim))
    m = np.mean(x, axis=axes, dtype=np.float64)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    v = np.mean(np.square(x - m.reshape(shape)), axis=axes, dtype=np.float64)
    return m, v


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    training: bool = True,
):
    """Batch normalisation over axis 1 for (N, C) or (N, C, H, W) inputs.

    Returns ``(out, batch_mean, batch_var)``; the statistics are ``None`` in
    inference mode, where the supplied running estimates are used instead.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            "batch_norm", f"input {x.shape} with gamma {gamma.shape} and beta {beta.shape}"
        )
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    g_ = gamma.data.reshape(shape)
    b_ = beta.data.reshape(shape)
    if not training:
        inv = (1.0 / np.sqrt(np.asarray(running_var, np.float64) + eps)).astype(_DTYPE)
        mu = np.asarray(running_mean, dtype=_DTYPE)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        out = g_ * xhat + b_

        def vjp_eval(g):
            gx = g * (g_ * inv.reshape(shape))
            return (
                gx,
                _sum64(g * xhat, axis=axes).astype(_DTYPE),
                _sum64(g, axis=axes).astype(_DTYPE),
            )

        return _make(out.astype(_DTYPE), "batch_norm", (x, gamma, beta), vjp_eval), None, None

    m, v = batch_stats(x.data)
    count = x.size // x.shape[1]
    inv = (1.0 / np.sqrt(v + eps)).astype(_DTYPE).reshape(shape)
    xhat = (x.data - m.astype(_DTYPE).reshape(shape)) * inv
    out = g_ * xhat + b_

    def vjp(g):
        dgamma = _sum64(g * xhat, axis=axes)
        dbeta = _sum64(g, axis=axes)
        dxhat = g * g_
        s1 = _sum64(dxhat, axis=axes).reshape(shape)
        s2 = _sum64(dxhat * xhat, axis=axes).reshape(shape)
        gx = (inv / count) * (count * dxhat - s1 - xhat * s2)
        return gx.astype(_DTYPE), dgamma.astype(_DTYPE), dbeta.astype(_DTYPE)

    return _make(out.astype(_DTYPE), "batch_norm", (x, gamma, beta), vjp), m, v


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            "softmax_cross_entropy", f"logits {logits.shape} vs labels {labels.shape}"
        )
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("softmax_cross_entropy", f"labels outside [0, {k})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(_DTYPE),)

    return _make(np.asarray(loss, dtype=_DTYPE), "softmax_cross_entropy", (logits,), vjp)
