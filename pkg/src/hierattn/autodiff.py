"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A Tape records one episode of forward computation; Tape.backward replays the
recorded closures in reverse order, accumulating gradients into every tracked
tensor (tensors created on the tape, plus parameter leaves flagged with
requires_grad). A tape supports exactly one backward pass.

All differentiable operations live in this module. Broadcasting follows numpy
rules; gradients of broadcast operands are summed back to the operand shape.
"""

import numpy as np

from .errors import ContractError, DimensionError, TapeError

# Names of the differentiable primitives, in definition order. gradcheck
# builds one finite-difference case per entry, so keep this list in sync
# when adding ops.
PRIMITIVE_OPS = []


def _primitive(fn):
    PRIMITIVE_OPS.append(fn.__name__)
    return fn


class Tape:
    """Recording of one forward episode, replayable backward exactly once."""

    def __init__(self):
        self._backops = []
        self._spent = False
        self._count = 0

    def _register(self):
        if self._spent:
            raise TapeError("tape already backpropagated; use a fresh tape")
        nid = self._count
        self._count += 1
        return nid

    def _record(self, fn):
        if self._spent:
            raise TapeError("cannot record onto a spent tape")
        self._backops.append(fn)

    def leaf(self, data):
        """Wrap an array as a tracked leaf tensor on this tape."""
        return Tensor(data, tape=self)

    def backward(self, root):
        """Seed d(root)/d(root) = 1 and replay the tape in reverse."""
        if self._spent:
            raise TapeError("backward already ran on this tape")
        if root.tape is not self:
            raise TapeError("root tensor was not recorded on this tape")
        if root.data.size != 1:
            raise ContractError(
                f"backward root must be scalar, got shape {root.data.shape}")
        self._spent = True
        root.grad = np.ones_like(root.data)
        # Pop as we replay: recorded closures capture large forward buffers,
        # and tape -> closure -> tensor -> tape is a reference cycle, so
        # dropping each closure promptly lets plain refcounting reclaim the
        # episode instead of waiting for the cycle collector.
        ops = self._backops
        self._backops = []
        while ops:
            ops.pop()()


class Tensor:
    """Dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "tape", "node_id", "requires_grad")

    def __init__(self, data, tape=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.requires_grad = bool(requires_grad)
        self.node_id = tape._register() if tape is not None else -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def detach(self):
        """Copy of the value with no tape link and no gradient."""
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got {self.data.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={self.tape is not None})"


def param(data):
    """Parameter leaf: persistent tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise TapeError("operation mixes tensors from two live tapes")
    return tape


def _tracked(t):
    return t.tape is not None or t.requires_grad


def _acc(t, g):
    if t.grad is None:
        t.grad = np.zeros(t.data.shape)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

@_primitive
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape=tape)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if _tracked(a):
                _acc(a, _unbroadcast(out.grad, a.data.shape))
            if _tracked(b):
                _acc(b, _unbroadcast(out.grad, b.data.shape))
        tape._record(backward)
    return out


@_primitive
def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data - b.data, tape=tape)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            if _tracked(a):
                _acc(a, _unbroadcast(out.grad, a.data.shape))
            if _tracked(b):
                _acc(b, _unbroadcast(-out.grad, b.data.shape))
        tape._record(backward)
    return out


@_primitive
def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape=tape)
    if tape is not None:
        ad, bd = a.data, b.data
        def backward():
            if out.grad is None:
                return
            if _tracked(a):
                _acc(a, _unbroadcast(out.grad * bd, a.data.shape))
            if _tracked(b):
                _acc(b, _unbroadcast(out.grad * ad, b.data.shape))
        tape._record(backward)
    return out


@_primitive
def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data / b.data, tape=tape)
    if tape is not None:
        ad, bd = a.data, b.data
        def backward():
            if out.grad is None:
                return
            if _tracked(a):
                _acc(a, _unbroadcast(out.grad / bd, a.data.shape))
            if _tracked(b):
                _acc(b, _unbroadcast(-out.grad * ad / (bd * bd), b.data.shape))
        tape._record(backward)
    return out


@_primitive
def neg(a):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(-a.data, tape=tape)
    if tape is not None:
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, -out.grad)
        tape._record(backward)
    return out


@_primitive
def exp(a):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.exp(a.data), tape=tape)
    if tape is not None:
        od = out.data
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * od)
        tape._record(backward)
    return out


@_primitive
def sqrt(a):
    """Element-wise square root; domain x > 0 (backward unbounded at 0)."""
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.sqrt(a.data), tape=tape)
    if tape is not None:
        od = out.data
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * 0.5 / od)
        tape._record(backward)
    return out


@_primitive
def relu(a):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.maximum(a.data, 0.0), tape=tape)
    if tape is not None:
        # subgradient 0 at the kink
        mask = a.data > 0.0
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * mask)
        tape._record(backward)
    return out


@_primitive
def sigmoid(a):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)), tape=tape)
    if tape is not None:
        od = out.data
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * od * (1.0 - od))
        tape._record(backward)
    return out


@_primitive
def tanh(a):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.tanh(a.data), tape=tape)
    if tape is not None:
        od = out.data
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * (1.0 - od * od))
        tape._record(backward)
    return out


@_primitive
def minimum(a, cap):
    """Elementwise min(a, cap) for a float cap; gradient 0 where clamped."""
    a = as_tensor(a)
    cap = float(cap)
    tape = _tape_of(a)
    out = Tensor(np.minimum(a.data, cap), tape=tape)
    if tape is not None:
        mask = a.data <= cap
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad * mask)
        tape._record(backward)
    return out


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def pointwise_activation(a, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation kind {kind!r}") from None
    return fn(a)


# ---------------------------------------------------------------------------
# reductions and shape ops

@_primitive
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), tape=tape)
    if tape is not None:
        in_shape = a.data.shape
        def backward():
            if out.grad is None or not _tracked(a):
                return
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % len(in_shape) for ax in axes)
                shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
                g = g.reshape(shape)
            _acc(a, np.broadcast_to(g, in_shape))
        tape._record(backward)
    return out


@_primitive
def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


@_primitive
def reshape(a, shape):
    a = as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.reshape(shape), tape=tape)
    if tape is not None:
        in_shape = a.data.shape
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad.reshape(in_shape))
        tape._record(backward)
    return out


@_primitive
def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.data.shape}")
    tape = _tape_of(a)
    out = Tensor(a.data.T.copy(), tape=tape)
    if tape is not None:
        def backward():
            if out.grad is not None and _tracked(a):
                _acc(a, out.grad.T)
        tape._record(backward)
    return out


@_primitive
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner axes differ: {a.data.shape[1]} vs {b.data.shape[0]}")
    tape = _tape_of(a, b)
    out = Tensor(a.data @ b.data, tape=tape)
    if tape is not None:
        ad, bd = a.data, b.data
        def backward():
            if out.grad is None:
                return
            if _tracked(a):
                _acc(a, out.grad @ bd.T)
            if _tracked(b):
                _acc(b, ad.T @ out.grad)
        tape._record(backward)
    return out


@_primitive
def concat_channels(parts):
    """Concatenate along axis 1 (channels). Parts must agree on other axes."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat_channels needs at least one part")
    nd = parts[0].ndim
    if nd < 2:
        raise DimensionError("concat_channels expects tensors with a channel axis 1")
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError(
                f"concat_channels rank mismatch: {parts[0].data.shape} vs {p.data.shape}")
        for ax in range(nd):
            if ax != 1 and p.data.shape[ax] != parts[0].data.shape[ax]:
                raise DimensionError(
                    f"concat_channels mismatch on axis {ax}: "
                    f"{parts[0].data.shape} vs {p.data.shape}")
    tape = _tape_of(*parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tape=tape)
    if tape is not None:
        widths = [p.data.shape[1] for p in parts]
        def backward():
            if out.grad is None:
                return
            start = 0
            for p, w in zip(parts, widths):
                if _tracked(p):
                    sl = [slice(None)] * nd
                    sl[1] = slice(start, start + w)
                    _acc(p, out.grad[tuple(sl)])
                start += w
        tape._record(backward)
    return out


@_primitive
def slice_channels(a, start, stop):
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("slice_channels expects a channel axis 1")
    C = a.data.shape[1]
    if not (0 <= start < stop <= C):
        raise IndexError(f"channel slice [{start}:{stop}] out of range for C={C}")
    tape = _tape_of(a)
    sl = [slice(None)] * a.ndim
    sl[1] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy(), tape=tape)
    if tape is not None:
        in_shape = a.data.shape
        def backward():
            if out.grad is not None and _tracked(a):
                g = np.zeros(in_shape)
                g[sl] = out.grad
                _acc(a, g)
        tape._record(backward)
    return out


# ---------------------------------------------------------------------------
# neural-net ops

@_primitive
def fully_connected(x, weights, bias=None):
    """weights (Dout, Din) @ x + bias. x may be (Din,) or a batch (N, Din).

    A single recorded op, not a matmul/transpose composite: weight and bias
    tensors are often parameter leaves living outside any tape, and gradients
    must land on them directly.
    """
    x, weights = as_tensor(x), as_tensor(weights)
    bias = None if bias is None else as_tensor(bias)
    if weights.ndim != 2:
        raise DimensionError(f"weights must be 2-D, got {weights.data.shape}")
    dout, din = weights.data.shape
    if bias is not None and bias.data.shape != (dout,):
        raise DimensionError(
            f"bias shape {bias.data.shape} does not match weight rows {dout}")
    if x.ndim == 1:
        if x.data.shape[0] != din:
            raise DimensionError(
                f"input length {x.data.shape[0]} != weight columns {din}")
        batched = False
        x2 = x.data[None, :]
    elif x.ndim == 2:
        if x.data.shape[1] != din:
            raise DimensionError(
                f"input width {x.data.shape[1]} != weight columns {din}")
        batched = True
        x2 = x.data
    else:
        raise DimensionError(
            f"fully_connected expects 1-D or 2-D input, got {x.data.shape}")
    y = x2 @ weights.data.T
    if bias is not None:
        y = y + bias.data
    tape = _tape_of(x, weights) if bias is None else _tape_of(x, weights, bias)
    out = Tensor(y if batched else y[0], tape=tape)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g2 = out.grad if batched else out.grad[None, :]
            if _tracked(x):
                gx = g2 @ weights.data
                _acc(x, gx if batched else gx[0])
            if _tracked(weights):
                _acc(weights, g2.T @ x2)
            if bias is not None and _tracked(bias):
                _acc(bias, g2.sum(axis=0))
        tape._record(backward)
    return out


@_primitive
def conv2d(x, kernel, stride=1, pad=0):
    """2-D cross-correlation, NCHW input, OIHW kernel, symmetric zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got {x.data.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be OIHW, got {kernel.data.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"pad must be >= 0, got {pad}")
    N, C, H, W = x.data.shape
    O, CK, kh, kw = kernel.data.shape
    if CK != C:
        raise DimensionError(
            f"conv2d channel mismatch on axis 1: input has {C}, kernel expects {CK}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    tape = _tape_of(x, kernel)

    if kh == 1 and kw == 1 and stride == 1:
        # pointwise conv as a channel matmul
        k2 = kernel.data.reshape(O, C)
        out_data = np.tensordot(k2, xp, axes=([1], [1])).transpose(1, 0, 2, 3)
        out = Tensor(out_data, tape=tape)
        if tape is not None:
            def backward():
                if out.grad is None:
                    return
                g = out.grad
                if _tracked(kernel):
                    dk = np.tensordot(g, xp, axes=([0, 2, 3], [0, 2, 3]))
                    _acc(kernel, dk.reshape(O, C, 1, 1))
                if _tracked(x):
                    dxp = np.tensordot(k2, g, axes=([0], [1])).transpose(1, 0, 2, 3)
                    _acc(x, dxp if pad == 0 else dxp[:, :, pad:pad + H, pad:pad + W])
            tape._record(backward)
        return out

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        N * Ho * Wo, C * kh * kw)
    kf = kernel.data.reshape(O, C * kh * kw)
    out = Tensor((cols @ kf.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2), tape=tape)
    if tape is not None:
        def backward():
            if out.grad is None:
                return
            g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(
                N * Ho * Wo, O)
            if _tracked(kernel):
                _acc(kernel, (g2.T @ cols).reshape(O, C, kh, kw))
            if _tracked(x):
                dcols = (g2 @ kf).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros((N, C, Hp, Wp))
                for p in range(kh):
                    for q in range(kw):
                        dxp[:, :, p:p + stride * Ho:stride,
                            q:q + stride * Wo:stride] += dcols[:, :, :, :, p, q]
                _acc(x, dxp if pad == 0 else dxp[:, :, pad:pad + H, pad:pad + W])
        tape._record(backward)
    return out


@_primitive
def avg_pool(x, size):
    """Non-overlapping size x size average pooling; H and W must divide."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool input must be NCHW, got {x.data.shape}")
    if size < 1:
        raise DimensionError(f"pool size must be >= 1, got {size}")
    N, C, H, W = x.data.shape
    if H % size or W % size:
        raise DimensionError(
            f"pool size {size} must divide spatial axes 2,3 of {x.data.shape}")
    Ho, Wo = H // size, W // size
    tape = _tape_of(x)
    pooled = x.data.reshape(N, C, Ho, size, Wo, size).mean(axis=(3, 5))
    out = Tensor(pooled, tape=tape)
    if tape is not None:
        inv = 1.0 / (size * size)
        def backward():
            if out.grad is not None and _tracked(x):
                g = out.grad[:, :, :, None, :, None] * inv
                _acc(x, np.broadcast_to(g, (N, C, Ho, size, Wo, size)).reshape(
                    N, C, H, W))
        tape._record(backward)
    return out


@_primitive
def global_avg_pool(x):
    """NCHW -> NC spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {x.data.shape}")
    N, C, H, W = x.data.shape
    tape = _tape_of(x)
    out = Tensor(x.data.mean(axis=(2, 3)), tape=tape)
    if tape is not None:
        inv = 1.0 / (H * W)
        def backward():
            if out.grad is not None and _tracked(x):
                _acc(x, np.broadcast_to(
                    out.grad[:, :, None, None] * inv, (N, C, H, W)))
        tape._record(backward)
    return out


def _interp_matrix(n_out, n_in):
    """Corner-aligned 1-D linear interpolation matrix (n_out, n_in)."""
    M = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        M[:, 0] = 1.0
        return M
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    f = src - i0
    M[np.arange(n_out), i0] += 1.0 - f
    M[np.arange(n_out), i0 + 1] += f
    return M


@_primitive
def bilinear_resize(x, out_h, out_w):
    """Corner-aligned bilinear resize of NCHW maps to (out_h, out_w).

    Convention: output corners sample input corners exactly, so resizing to
    the input size is the identity and a 1x1 input broadcasts its value.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_resize expects NCHW, got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    N, C, H, W = x.data.shape
    R = _interp_matrix(out_h, H)
    Cm = _interp_matrix(out_w, W)
    tape = _tape_of(x)
    out = Tensor(np.matmul(np.matmul(R, x.data), Cm.T), tape=tape)
    if tape is not None:
        def backward():
            if out.grad is not None and _tracked(x):
                _acc(x, np.matmul(np.matmul(R.T, out.grad), Cm))
        tape._record(backward)
    return out


@_primitive
def window_resample(x, rx, ry, rl, out_h, out_w):
    """Bilinear resample of the square window [rx-rl, rx+rl] x [ry-rl, ry+rl].

    x is NCHW; rx, ry, rl are scalars or (N,) tensors in normalized [0,1]
    image coordinates (corner convention: coordinate t sits at pixel t*(W-1)).
    Output pixel (i, j) samples the window corner-aligned. Gradients flow to
    the source and to the window coordinates; samples clipped at the image
    border get zero coordinate gradient.
    """
    x, rx, ry, rl = as_tensor(x), as_tensor(rx), as_tensor(ry), as_tensor(rl)
    if x.ndim != 4:
        raise DimensionError(f"window_resample expects NCHW, got {x.data.shape}")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    N, C, H, W = x.data.shape
    for name, r in (("rx", rx), ("ry", ry), ("rl", rl)):
        if r.data.shape not in ((), (N,)):
            raise DimensionError(
                f"{name} must be scalar or ({N},), got {r.data.shape}")
    tape = _tape_of(x, rx, ry, rl)

    rxd = np.broadcast_to(rx.data.reshape(-1), (N,)) if rx.data.shape == () else rx.data
    ryd = np.broadcast_to(ry.data.reshape(-1), (N,)) if ry.data.shape == () else ry.data
    rld = np.broadcast_to(rl.data.reshape(-1), (N,)) if rl.data.shape == () else rl.data

    ratio_i = (np.arange(out_h) / (out_h - 1)) if out_h > 1 else np.full(1, 0.5)
    ratio_j = (np.arange(out_w) / (out_w - 1)) if out_w > 1 else np.full(1, 0.5)

    u = (rxd[:, None] - rld[:, None]) + 2.0 * rld[:, None] * ratio_j[None, :]
    v = (ryd[:, None] - rld[:, None]) + 2.0 * rld[:, None] * ratio_i[None, :]
    pu_raw = u * (W - 1)
    pv_raw = v * (H - 1)
    pu = np.clip(pu_raw, 0.0, W - 1)
    pv = np.clip(pv_raw, 0.0, H - 1)
    in_u = (pu_raw > 0.0) & (pu_raw < W - 1)  # clip inactive -> coord grads flow
    in_v = (pv_raw > 0.0) & (pv_raw < H - 1)

    i0 = np.clip(np.floor(pv).astype(int), 0, max(H - 2, 0))
    j0 = np.clip(np.floor(pu).astype(int), 0, max(W - 2, 0))
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    fi = pv - i0
    fj = pu - j0

    n_idx = np.arange(N)[:, None]
    rows0 = x.data[n_idx, :, i0, :]              # (N, out_h, C, W)
    rows1 = x.data[n_idx, :, i1, :]
    tmp = (1.0 - fi)[:, :, None, None] * rows0 + fi[:, :, None, None] * rows1
    jj0 = np.broadcast_to(j0[:, None, None, :], (N, out_h, C, out_w))
    jj1 = np.broadcast_to(j1[:, None, None, :], (N, out_h, C, out_w))
    g0 = np.take_along_axis(tmp, jj0, axis=3)
    g1 = np.take_along_axis(tmp, jj1, axis=3)
    out_nhcw = (1.0 - fj)[:, None, None, :] * g0 + fj[:, None, None, :] * g1
    out = Tensor(np.ascontiguousarray(out_nhcw.transpose(0, 2, 1, 3)), tape=tape)

    if tape is not None:
        def backward():
            if out.grad is None:
                return
            gt = out.grad.transpose(0, 2, 1, 3)      # (N, out_h, C, out_w)
            need_coords = _tracked(rx) or _tracked(ry) or _tracked(rl)
            if _tracked(x):
                dtmp = np.zeros((N, out_h, C, W))
                np.add.at(dtmp, (n_idx[:, :, None, None].repeat(out_h, 1),
                                 np.arange(out_h)[None, :, None, None],
                                 np.arange(C)[None, None, :, None],
                                 jj0), (1.0 - fj)[:, None, None, :] * gt)
                np.add.at(dtmp, (n_idx[:, :, None, None].repeat(out_h, 1),
                                 np.arange(out_h)[None, :, None, None],
                                 np.arange(C)[None, None, :, None],
                                 jj1), fj[:, None, None, :] * gt)
                dx = np.zeros((N, H, C, W))
                np.add.at(dx, (n_idx, i0), (1.0 - fi)[:, :, None, None] * dtmp)
                np.add.at(dx, (n_idx, i1), fi[:, :, None, None] * dtmp)
                _acc(x, dx.transpose(0, 2, 1, 3))
            if need_coords:
                # d out / d fj = g1 - g0 ; d out / d fi flows through tmp
                dfj = ((g1 - g0) * gt).sum(axis=(1, 2))          # (N, out_w)
                dpu = dfj * in_u * (W - 1)
                drows = ((rows1 - rows0))                        # (N,out_h,C,W)
                dcol0 = np.take_along_axis(drows, jj0, axis=3)
                dcol1 = np.take_along_axis(drows, jj1, axis=3)
                dtmp_fi = (1.0 - fj)[:, None, None, :] * dcol0 + \
                    fj[:, None, None, :] * dcol1
                dfi = (dtmp_fi * gt).sum(axis=(2, 3))            # (N, out_h)
                dpv = dfi * in_v * (H - 1)
                du = dpu                                          # d pu/d u = W-1 folded
                dv = dpv
                drx = du.sum(axis=1)
                dry = dv.sum(axis=1)
                drl = (du * (2.0 * ratio_j[None, :] - 1.0)).sum(axis=1) + \
                      (dv * (2.0 * ratio_i[None, :] - 1.0)).sum(axis=1)
                for t, g in ((rx, drx), (ry, dry), (rl, drl)):
                    if _tracked(t):
                        _acc(t, g.sum() if t.data.shape == () else g)
            # noqa: closure keeps rows0/rows1/g0/g1 alive for the backward pass
        tape._record(backward)
    return out


@_primitive
def softmax(a):
    """Row softmax along the last axis, max-shifted for stability."""
    a = as_tensor(a)
    tape = _tape_of(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True), tape=tape)
    if tape is not None:
        od = out.data
        def backward():
            if out.grad is not None and _tracked(a):
                inner = (out.grad * od).sum(axis=-1, keepdims=True)
                _acc(a, od * (out.grad - inner))
        tape._record(backward)
    return out


@_primitive
def take_class(a, labels):
    """Pick a[..., label] per row: (K,)+int -> scalar, (N,K)+(N,) -> (N,)."""
    a = as_tensor(a)
    if a.ndim == 1:
        K = a.data.shape[0]
        idx = int(labels)
        if not 0 <= idx < K:
            raise IndexError(f"label {idx} out of range for {K} classes")
        tape = _tape_of(a)
        out = Tensor(a.data[idx], tape=tape)
        if tape is not None:
            def backward():
                if out.grad is not None and _tracked(a):
                    g = np.zeros(K)
                    g[idx] = out.grad
                    _acc(a, g)
            tape._record(backward)
        return out
    if a.ndim == 2:
        N, K = a.data.shape
        idx = np.asarray(labels, dtype=int)
        if idx.shape != (N,):
            raise DimensionError(f"labels must be ({N},), got {idx.shape}")
        if idx.min() < 0 or idx.max() >= K:
            raise IndexError(f"label out of range for {K} classes")
        tape = _tape_of(a)
        rows = np.arange(N)
        out = Tensor(a.data[rows, idx], tape=tape)
        if tape is not None:
            def backward():
                if out.grad is not None and _tracked(a):
                    g = np.zeros((N, K))
                    g[rows, idx] = out.grad
                    _acc(a, g)
            tape._record(backward)
        return out
    raise DimensionError(f"take_class expects 1-D or 2-D input, got {a.data.shape}")


@_primitive
def softmax_cross_entropy(logits, label):
    """-log softmax(logits)[label], max-shifted; gradient softmax - onehot.

    (K,) logits with an int label give a scalar; (N,K) logits with (N,)
    labels give per-sample losses (N,).
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        K = logits.data.shape[0]
        idx = int(label)
        if not 0 <= idx < K:
            raise IndexError(f"label {idx} out of range for {K} classes")
        tape = _tape_of(logits)
        z = logits.data - logits.data.max()
        lse = np.log(np.exp(z).sum())
        out = Tensor(lse - z[idx], tape=tape)
        if tape is not None:
            sm = np.exp(z - lse)
            def backward():
                if out.grad is not None and _tracked(logits):
                    g = sm.copy()
                    g[idx] -= 1.0
                    _acc(logits, g * out.grad)
            tape._record(backward)
        return out
    if logits.ndim == 2:
        N, K = logits.data.shape
        idx = np.asarray(label, dtype=int)
        if idx.shape != (N,):
            raise DimensionError(f"labels must be ({N},), got {idx.shape}")
        if idx.min() < 0 or idx.max() >= K:
            raise IndexError(f"label out of range for {K} classes")
        tape = _tape_of(logits)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(N)
        out = Tensor(lse - z[rows, idx], tape=tape)
        if tape is not None:
            sm = np.exp(z - lse[:, None])
            def backward():
                if out.grad is not None and _tracked(logits):
                    g = sm.copy()
                    g[rows, idx] -= 1.0
                    _acc(logits, g * out.grad[:, None])
            tape._record(backward)
        return out
    raise DimensionError(
        f"softmax_cross_entropy expects 1-D or 2-D logits, got {logits.data.shape}")
