"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a vector-Jacobian product closure. :func:`backward` orders the
recorded graph into a :class:`ComputationTape` and replays it in reverse,
accumulating ``.grad`` on every leaf that requires gradients.

Arrays are stored as numpy buffers in row-major ``[B, C, H, W]`` layout. The
dtype of the inputs is preserved; python scalars never upcast.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """A leaf tensor that is trained by an optimizer."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=True)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = g / bd
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    ad = a.data
    if exponent == 2:
        return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")
    out = ad ** exponent
    return _node(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.logaddexp(0.0, ad).astype(a.dtype), (a,), lambda g: (g * expit(ad),), "softplus")


def log_sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = -np.logaddexp(0.0, -ad).astype(a.dtype)
    return _node(out, (a,), lambda g: (g * expit(-ad),), "log_sigmoid")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    ad = a.data
    mask = (ad >= low) & (ad <= high)
    return _node(np.clip(ad, low, high), (a,), lambda g: (g * mask,), "clip")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
                 "minimum")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ad = a.data
    m = np.max(ad, axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


def safe_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at the origin is taken as zero."""
    axes = _norm_axes(axis, a.ndim)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axes))

    def vjp(g):
        denom = np.expand_dims(out, axes)
        scale = np.divide(np.expand_dims(g, axes), denom,
                          out=np.zeros_like(denom), where=denom > 0)
        return (ad * scale,)

    return _node(np.asarray(out), (a,), vjp, "norm")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def expand(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _node(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "expand")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = _is_basic_index(index)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _node(out, tensors, vjp, "concat")


# ---------------------------------------------------------------------------
# Linear maps
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def channel_mix(x: Tensor, weight) -> Tensor:
    """Apply a ``[Cout, Cin]`` matrix across channels at every spatial site."""
    x, weight = _pair(x, weight)
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"channel_mix shape mismatch: x {x.shape}, weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)

    def vjp(g):
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gw

    return _node(np.ascontiguousarray(out), (x, weight), vjp, "channel_mix")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2-d cross-correlation of ``[B,Cin,H,W]`` with ``[Cout,Cin,kh,kw]``.

    Kernel taps that can only ever see zero padding (kernel wider than the
    image) are dropped before the product; their gradient is exactly zero.
    """
    x, kernel = _pair(x, kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d needs odd kernel sizes, got {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias, like=x)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} outputs")

    ph, pw = min(kh // 2, H - 1), min(kw // 2, W - 1)
    rows = slice(kh // 2 - ph, kh // 2 + ph + 1)
    cols_ = slice(kw // 2 - pw, kw // 2 + pw + 1)
    kd = kernel.data[:, :, rows, cols_]
    th, tw = kd.shape[2], kd.shape[3]
    # contiguous so the product stays on the BLAS path
    wmat = np.ascontiguousarray(kd).reshape(cout, C * th * tw)

    if th == 1 and tw == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        win = sliding_window_view(xp, (th, tw), axis=(2, 3))  # B,C,H,W,th,tw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * th * tw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, cout).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        gk[:, :, rows, cols_] = (g2.T @ cols).reshape(cout, C, th, tw)
        gcols = (g2 @ wmat).reshape(B, H, W, C, th, tw)
        if th == 1 and tw == 1:
            gx = np.ascontiguousarray(gcols[..., 0, 0].transpose(0, 3, 1, 2))
        else:
            gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
            for i in range(th):
                for j in range(tw):
                    gxp[:, :, i:i + H, j:j + W] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, vjp, "conv2d")


def custom(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Record an operation whose value and vector-Jacobian product are supplied by the caller."""
    return _node(data, parents, vjp, op)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

class ComputationTape:
    """Topologically ordered record of the nodes that lead to ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor, tape: ComputationTape | None = None) -> ComputationTape:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires gradients")
    tape = tape if tape is not None else ComputationTape(loss)
    tape.replay(np.ones(loss.shape, dtype=loss.dtype))
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
