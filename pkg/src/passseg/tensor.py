"""Dense float32 tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` whose ``node`` records
the operation tag, its inputs and a closure mapping the output gradient to the
input gradients. Nodes receive a globally increasing sequence number on
creation, so inputs always precede outputs and :func:`backward` can visit the
reachable graph in exact reverse creation order.

Layout convention for images is NHWC; convolution kernels are ``[k, k, Cin, Cout]``.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_sequence = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """Raised when an API precondition (other than shape) is violated."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """An n-dimensional float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "node", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
        return

    nodes: dict[int, Node] = {}
    owners: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or node.seq in nodes:
            continue
        nodes[node.seq] = node
        owners[node.seq] = t
        stack.extend(node.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for seq in sorted(nodes, reverse=True):
        node = nodes[seq]
        out = owners[seq]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                _accumulate(t, gi)
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, "div", (a, b), back)


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def abs_(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient is zero where the clamp is active."""
    inside = (x.data >= low) & (x.data <= high)
    return _make(np.clip(x.data, low, high), "clip", (x,), lambda g: (g * inside,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # at exactly 0 the subgradient is the leak slope
    positive = x.data > 0
    scale = np.where(positive, DTYPE(1.0), DTYPE(slope)).astype(DTYPE)
    return _make(x.data * scale, "leaky_relu", (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep strictly inside (0, 1) at float32 precision
    np.clip(out, np.finfo(DTYPE).tiny, np.nextafter(DTYPE(1.0), DTYPE(0.0)), out=out)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "softmax_channel", (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)``."""
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / DTYPE(1.0 - rate)
    return _make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out, dtype=DTYPE), "sum", (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, "concat", tuple(tensors), back)


def flip_width(x: Tensor) -> Tensor:
    """Mirror an NHWC tensor along W."""
    return _make(x.data[:, :, ::-1, :].copy(), "flip_width", (x,), lambda g: (g[:, :, ::-1, :],))


def flip_width_where(x: Tensor, flags: np.ndarray) -> Tensor:
    """Mirror along W only the samples whose flag is set."""
    flags = np.asarray(flags, dtype=bool)
    out = x.data.copy()
    out[flags] = out[flags][:, :, ::-1, :]

    def back(g):
        g = g.copy()
        g[flags] = g[flags][:, :, ::-1, :]
        return (g,)

    return _make(out, "flip_width", (x,), back)


# ---------------------------------------------------------------------------
# network layers


def _require_nhwc(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an NHWC tensor, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # column order (i, j, c) matches kernel.reshape(k*k*Cin, Cout)
    return np.concatenate([xp[:, i:i + h, j:j + w, :] for i in range(k) for j in range(k)], axis=-1)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of an NHWC input with a ``[k, k, Cin, Cout]`` kernel."""
    _require_nhwc(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 != 1:
        raise ShapeError(f"conv2d kernel must be [k, k, Cin, Cout] with odd k, got {kernel.shape}")
    if stride != 1:
        raise ShapeError(f"conv2d supports stride 1 only, got {stride}")
    k, _, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d input has {c} channels but kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if padding == "same":
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ContractError(f"unknown padding {padding!r}")
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d valid padding needs H, W >= {k}, got {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    k2 = kernel.data.reshape(k * k * cin, cout)
    if k == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols = _im2col(xp, k, ho, wo).reshape(-1, k * k * cin)
    out = cols @ k2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ k2.T).reshape(n, ho, wo, k * k * cin)
            if k == 1:
                gx = gcols
            else:
                gxp = np.zeros(xp.shape, dtype=DTYPE)
                for idx in range(k * k):
                    i, j = divmod(idx, k)
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[..., idx * cin:(idx + 1) * cin]
                gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _make(out, "conv2d", inputs, back)


def _windows(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    # -> (N, H/2, W/2, C, 4) with window cells in row-major order
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)


def _unwindows(win: np.ndarray) -> np.ndarray:
    n, h2, w2, c, _ = win.shape
    return win.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)


def _require_even(x: Tensor, op: str) -> None:
    _require_nhwc(x, op)
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"{op} needs even H and W, got {x.shape[1]}x{x.shape[2]}")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Ties route the gradient to the row-major-first cell."""
    _require_even(x, "maxpool2")
    win = _windows(x.data)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=DTYPE)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        return (_unwindows(gw),)

    return _make(out, "maxpool2", (x,), back)


def avgpool2(x: Tensor) -> Tensor:
    _require_even(x, "avgpool2")
    out = _windows(x.data).mean(axis=-1)

    def back(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2),)

    return _make(out, "avgpool2", (x,), back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _require_nhwc(x, "upsample2")
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g):
        n, h, w, c = g.shape
        return (g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)

    return _make(out, "upsample2", (x,), back)


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every (sample, channel) plane to zero mean and unit variance."""
    _require_nhwc(x, "instance_norm")
    c = x.shape[3]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"instance_norm gain/shift must have shape ({c},)")
    if eps <= 0:
        raise ContractError("instance_norm eps must be positive")
    m = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = centered * inv_std
    out = xhat * gain.data + shift.data

    def back(g):
        gg = (g * xhat).sum(axis=(0, 1, 2)) if gain.requires_grad else None
        gs = g.sum(axis=(0, 1, 2)) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=(1, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
            gx = (inv_std / m) * (m * dxhat - s1 - xhat * s2)
        return gx, gg, gs

    return _make(out, "instance_norm", (x, gain, shift), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape [N, F]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense cannot combine input {x.shape} with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def back(g):
        return (g @ weight.data.T if x.requires_grad else None,
                x.data.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _make(out, "dense", (x, weight, bias), back)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad and t.node is None]
