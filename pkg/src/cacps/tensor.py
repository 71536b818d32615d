"""Dense float64 N-D tensors with reverse-mode automatic differentiation.

Every differentiable operation links its output to its inputs together with a
local vector-Jacobian rule. ``backward`` linearizes the reachable graph into a
:class:`Tape` and replays it in reverse, accumulating ``.grad`` on every tensor
that requires gradient. Tensors are treated as immutable while they
participate in a graph; parameters are only updated between training steps.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_CLAMP = 1e-12  # lower clamp for log arguments and div denominators


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeMismatch(TensorError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonFiniteValues(TensorError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


class BackwardError(TensorError):
    pass


def _as_array(data) -> np.ndarray:
    # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
    arr = np.asarray(data, dtype=np.float64, order="C")
    return arr


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``requires_grad`` marks leaves whose gradient should be accumulated; any
    op with at least one grad-requiring input produces a grad-requiring
    output. ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_vjp", "_op", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs: tuple = ()
        self._vjp = None
        self._op = "leaf"
        self._backward_done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch("item", self.shape)
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same values cut off from the graph; never accumulates grad."""
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def backward(self):
        backward(self)


class Tape:
    """Linearized record of the operations reachable from one output tensor.

    Replaying the records in reverse order visits every reachable operation
    exactly once; order comes from a depth-first topological sort, so each
    tensor has received all its downstream contributions before its own rule
    fires.
    """

    def __init__(self, records: list):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._vjp is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node._inputs:
                stack.append((inp, False))
        return cls(order)

    def replay_backward(self) -> None:
        for out in reversed(self.records):
            g = out.grad
            if g is None:
                continue
            grads = out._vjp(g)
            for inp, gi in zip(out._inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                # accumulation always allocates, so aliased grad arrays stay safe
                inp.grad = gi if inp.grad is None else inp.grad + gi


def backward(scalar: Tensor) -> None:
    """Run reverse-mode accumulation from a one-element tensor.

    Populates ``.grad`` for every grad-requiring ancestor. Calling it twice on
    the same output without rebuilding the graph raises, since intermediate
    grads from the first pass would silently double-count.
    """
    if scalar.data.size != 1:
        raise BackwardError(f"backward requires a scalar output, got shape {scalar.shape}")
    if scalar._backward_done:
        raise BackwardError("backward already ran for this output; rebuild the graph or reset grads")
    scalar._backward_done = True
    if scalar._vjp is None and not scalar.requires_grad:
        return  # detached constant: nothing to do
    scalar.grad = np.ones_like(scalar.data)
    Tape.from_root(scalar).replay_backward()


def _record(out: Tensor, op: str, inputs: tuple, vjp) -> Tensor:
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._vjp = vjp
        out._op = op
    return out


def _constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.full(ref.shape, float(value)))


def _check_pair(op: str, a: Tensor, b) -> tuple:
    """Coerce the second operand of a binary op: equal-shape tensor or scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeMismatch(op, a.shape, b.shape)
        return b, None
    return None, float(b)


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteValues(op)
    return arr


# -- elementwise ops --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    bt, c = _check_pair("add", a, b)
    if bt is None:
        out = Tensor(a.data + c)
        return _record(out, "add", (a,), lambda g: (g,))
    out = Tensor(a.data + bt.data)
    return _record(out, "add", (a, bt), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    bt, c = _check_pair("sub", a, b)
    if bt is None:
        out = Tensor(a.data - c)
        return _record(out, "sub", (a,), lambda g: (g,))
    out = Tensor(a.data - bt.data)
    return _record(out, "sub", (a, bt), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    bt, c = _check_pair("mul", a, b)
    if bt is None:
        out = Tensor(a.data * c)
        return _record(out, "mul", (a,), lambda g: (g * c,))
    out = Tensor(a.data * bt.data)
    ad, bd = a.data, bt.data
    return _record(out, "mul", (a, bt), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    """Elementwise division; denominators are clamped to >= 1e-12.

    Intended for positive denominators (probabilities); the clamp keeps
    underflowed values from producing infinities.
    """
    bt, c = _check_pair("div", a, b)
    if bt is None:
        cc = max(c, EPS_CLAMP)
        out = Tensor(_check_finite("div", a.data / cc))
        return _record(out, "div", (a,), lambda g: (g / cc,))
    bc = np.maximum(bt.data, EPS_CLAMP)
    out = Tensor(_check_finite("div", a.data / bc))
    ad = a.data
    passthrough = bt.data > EPS_CLAMP

    def vjp(g):
        return g / bc, np.where(passthrough, -g * ad / (bc * bc), 0.0)

    return _record(out, "div", (a, bt), vjp)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported via NonFiniteValues
        out_data = _check_finite("exp", np.exp(a.data))
    out = Tensor(out_data)
    return _record(out, "exp", (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    """Natural log of max(x, 1e-12); flat (zero-grad) below the clamp."""
    clamped = np.maximum(a.data, EPS_CLAMP)
    out = Tensor(_check_finite("log", np.log(clamped)))
    passthrough = a.data > EPS_CLAMP
    return _record(out, "log", (a,), lambda g: (np.where(passthrough, g / clamped, 0.0),))


def sqrt(a: Tensor) -> Tensor:
    out_data = _check_finite("sqrt", np.sqrt(a.data))
    out = Tensor(out_data)
    return _record(out, "sqrt", (a,), lambda g: (g * 0.5 / np.maximum(out_data, EPS_CLAMP),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, "relu", (a,), lambda g: (g * mask,))


# -- reductions -------------------------------------------------------------


def _norm_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise TensorError(f"reduce: duplicate axes {axes}")
    for ax in axes:
        if ax >= ndim:
            raise TensorError(f"reduce: axis {ax} out of range for ndim {ndim}")
    return axes


def _expand_grad(g: np.ndarray, shape, axes) -> np.ndarray:
    kept = tuple(1 if ax in axes else s for ax, s in enumerate(shape))
    return np.broadcast_to(g.reshape(kept), shape)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    if len(axes) == 0:
        out = Tensor(a.data.copy())
        return _record(out, "sum", (a,), lambda g: (g,))
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise TensorError("reduce: empty reduction (zero-sized axis)")
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))
    shape = a.shape
    return _record(out, "sum", (a,), lambda g: (np.ascontiguousarray(_expand_grad(g, shape, axes)),))


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    if len(axes) == 0:
        out = Tensor(a.data.copy())
        return _record(out, "mean", (a,), lambda g: (g,))
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise TensorError("reduce: empty reduction (zero-sized axis)")
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    shape = a.shape
    inv = 1.0 / count
    return _record(out, "mean", (a,), lambda g: (np.ascontiguousarray(_expand_grad(g, shape, axes)) * inv,))


# -- structural ops ---------------------------------------------------------


def concat_channels(tensors) -> Tensor:
    tensors = tuple(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeMismatch("concat_channels", base, t.shape)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    widths = [t.shape[1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _record(out, "concat_channels", tensors, vjp)


def concat_batch(a: Tensor, b: Tensor) -> Tensor:
    """Stack two tensors along the batch axis; backward splits the gradient."""
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeMismatch("concat_batch", a.shape, b.shape)
    out = Tensor(np.concatenate([a.data, b.data], axis=0))
    na = a.shape[0]

    def vjp(g):
        return np.ascontiguousarray(g[:na]), np.ascontiguousarray(g[na:])

    return _record(out, "concat_batch", (a, b), vjp)


def take_batch(a: Tensor, indices) -> Tensor:
    """Select items along the batch axis; backward scatter-adds into place."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, "take_batch", (a,), vjp)


def max_pool2d(a: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route gradient to the first position."""
    if a.ndim != 4:
        raise ShapeMismatch("max_pool2d", a.shape)
    n, c, h, w = a.shape
    if h % window or w % window:
        raise ShapeMismatch("max_pool2d", a.shape, (window, window))
    ho, wo = h // window, w // window
    tiles = a.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.ascontiguousarray(tiles).reshape(n, c, ho, wo, window * window)
    idx = tiles.argmax(axis=-1)
    out = Tensor(np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0])

    def vjp(g):
        flat = np.zeros((n, c, ho, wo, window * window))
        np.put_along_axis(flat, idx[..., None], g[..., None], axis=-1)
        back = flat.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(back).reshape(n, c, h, w),)

    return _record(out, "max_pool2d", (a,), vjp)


def nearest_upsample2(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeMismatch("nearest_upsample2", a.shape)
    n, c, h, w = a.shape
    out = Tensor(a.data.repeat(2, axis=2).repeat(2, axis=3))

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, "nearest_upsample2", (a,), vjp)


def softmax_channels(a: Tensor) -> Tensor:
    """Per-pixel softmax over axis 1, stabilized by max subtraction."""
    if a.ndim != 4:
        raise ShapeMismatch("softmax_channels", a.shape)
    if a.shape[1] < 2:
        raise ShapeMismatch("softmax_channels", a.shape)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        dot = (p * g).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, "softmax_channels", (a,), vjp)


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance.

    No learned affine part. Uses the biased variance, matching the vjp below.
    """
    if a.ndim != 4:
        raise ShapeMismatch("instance_norm", a.shape)
    x = a.data
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv
    out = Tensor(y)

    def vjp(g):
        g_mean = g.mean(axis=(2, 3), keepdims=True)
        gy_mean = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - g_mean - y * gy_mean),)

    return _record(out, "instance_norm", (a,), vjp)


def one_hot_argmax_channels(a: Tensor) -> Tensor:
    """Per-pixel one-hot of the channel argmax; ties go to the lowest index.

    The result is always detached: hard labels carry no gradient.
    """
    if a.ndim != 4:
        raise ShapeMismatch("one_hot_argmax_channels", a.shape)
    idx = a.data.argmax(axis=1)
    out = np.zeros_like(a.data)
    np.put_along_axis(out, idx[:, None, :, :], 1.0, axis=1)
    return Tensor(out)


def conv2d(a: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of [N,C,H,W] with [K,C,kh,kw] kernels.

    Odd kernel sides only; the output side (H + 2*padding - kh)/stride + 1
    must be integral. Gradients flow to the input, the kernel, and the bias.
    """
    if a.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch("conv2d", a.shape, kernel.shape)
    n, c, h, w = a.shape
    k, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeMismatch("conv2d", a.shape, kernel.shape)
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError(f"conv2d: kernel sides must be odd, got {(kh, kw)}")
    if padding < 0 or stride < 1:
        raise TensorError(f"conv2d: invalid stride/padding {(stride, padding)}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise TensorError(
            f"conv2d: non-integral output size for input {(h, w)}, kernel {(kh, kw)}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if bias is not None and bias.shape != (k,):
        raise ShapeMismatch("conv2d bias", bias.shape, (k,))

    if padding:
        xp = np.pad(a.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = a.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # [N,Ho,Wo,K]
    out_data = np.ascontiguousarray(np.moveaxis(out_data, 3, 1))
    if bias is not None:
        out_data += bias.data[None, :, None, None]
    out = Tensor(out_data)

    kd = kernel.data

    def vjp(g):
        win_b = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        d_kernel = np.tensordot(g, win_b, axes=([0, 2, 3], [0, 2, 3]))  # [K,C,kh,kw]
        dxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                contrib = np.tensordot(g, kd[:, :, dy, dx], axes=([1], [0]))  # [N,Ho,Wo,C]
                dxp[:, :, dy : dy + ho * stride : stride, dx : dx + wo * stride : stride] += np.moveaxis(
                    contrib, 3, 1
                )
        if padding:
            d_input = np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
        else:
            d_input = dxp
        if bias is None:
            return d_input, d_kernel
        return d_input, d_kernel, g.sum(axis=(0, 2, 3))

    inputs = (a, kernel) if bias is None else (a, kernel, bias)
    return _record(out, "conv2d", inputs, vjp)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
