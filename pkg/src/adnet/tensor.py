"""Small reverse-mode differentiation engine over numpy arrays.

Image-like tensors use the (batch, channel, height, width) layout. Every op
records a node holding its parents and a closure that maps the output
gradient to one gradient per parent; :func:`backward` walks those nodes in
reverse topological order exactly once.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph nodes (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Array value with an optional gradient buffer and graph link."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad)`` must return a tuple with one entry per parent
    (``None`` for parents that need no gradient).
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    Gradients accumulate into existing buffers. Tensors listed in ``wrt``
    that are not reachable end up with an all-zero buffer.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if wrt is not None:
        for t in wrt:
            if t.grad is None:
                t.zero_grad()
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for p, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ----------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_op("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0 < alpha < 1:
        raise ValueError("leaky_relu slope must lie in (0, 1)")
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return make_op("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str, alpha: float = 0.1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return make_op("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_op(
        "mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


# ------------------------------------------------------------------- channels


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: spatial mismatch {ref} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return make_op("concat", np.concatenate([p.data for p in parts], axis=1), parts, back)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_op("channel_slice", x.data[:, start:stop], (x,), back)


# ------------------------------------------------------------------ resampling


def _interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype) -> np.ndarray:
    i = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = i * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(n_out)
    else:
        src = np.clip((i + 0.5) * n_in / n_out - 0.5, 0, None)
    lo = np.minimum(np.floor(src).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, scale: int, align_corners: bool = True) -> Tensor:
    """Bilinear upsampling by an integer factor.

    ``align_corners=True`` maps corner pixels onto corner pixels. The
    half-pixel convention (``False``) commutes with even translations, which
    tiled inference relies on.
    """
    if scale < 1:
        raise ValueError("upsample scale must be >= 1")
    if scale == 1:
        return x
    _, _, h, w = x.shape
    ay = _interp_matrix(h, h * scale, align_corners, x.dtype)
    ax = _interp_matrix(w, w * scale, align_corners, x.dtype)
    out = np.matmul(ay, np.matmul(x.data, ax.T))
    return make_op("upsample", out, (x,), lambda g: (np.matmul(ay.T, np.matmul(g, ax)),))


# --------------------------------------------------------------------- conv2d


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, ho, wo, stride, dilation):
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride,
                                  x0 : x0 + stride * (wo - 1) + 1 : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, padded_shape, kh, kw, ho, wo, stride, dilation):
    b, c = padded_shape[:2]
    gx = np.zeros(padded_shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            gx[:, :, y0 : y0 + stride * (ho - 1) + 1 : stride,
               x0 : x0 + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return gx


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: weight expects {cin} input channels, got {c}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo}")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if pointwise:
        cols = x.data.reshape(b, c, h * w)
    else:
        cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    wm = weight.data.reshape(cout, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(b, cout, ho, wo)

    def back(g):
        g = g.reshape(b, cout, ho * wo)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(wm.T, g)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = _col2im(gcols, xp.shape, kh, kw, ho, wo, stride, dilation)
                if padding:
                    gx = gx[:, :, padding:-padding, padding:-padding]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, parents, back)
