"""Minimal reverse-mode autodiff over numpy arrays.

Tensors are float32, up to 4-D (batch, channel, height, width). A Tape
records operations define-by-run; replaying it backwards from a scalar
fills the gradients of all reachable leaves. The op set is exactly what
the registration pipeline needs: elementwise arithmetic, reductions,
matmul, 2-D convolution, bilinear grid sampling and separable
correlation with reflect borders.
"""

from __future__ import annotations

import math

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class GradientError(RuntimeError):
    """A non-finite value appeared during the backward pass."""


_ACTIVE_TAPE = None


class Tensor:
    """Dense float32 array plus an optional gradient buffer.

    Tensors are immutable after creation except through the optimizer's
    in-place parameter updates.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad=False, _leaf=True, _check=True):
        arr = np.asarray(data)
        # scalars produced by 64-bit accumulating reductions keep their
        # precision; everything else is 32-bit
        dtype = np.float64 if (arr.size == 1 and arr.dtype == np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        if _check and not np.all(np.isfinite(self.data)):
            raise ContractViolation("tensor contains non-finite values")
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = _leaf

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded ops below
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


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; ops executed inside record themselves when
    any input requires a gradient. The record is topologically ordered by
    construction.
    """

    def __init__(self):
        self._records = []  # (op name, inputs, output, backward fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, name, inputs, output, backward):
        self._records.append((name, inputs, output, backward))

    def backward(self, loss, leaves=()):
        """Populate .grad on reachable leaves from a scalar loss.

        Leaves listed in `leaves` always receive a gradient buffer
        (zeros when unreachable). The tape is consumed.
        """
        if loss.data.size != 1:
            raise ContractViolation("backward requires a scalar loss")
        grads = {id(loss): np.ones(loss.data.shape, dtype=np.float32)}
        for name, inputs, output, backward in reversed(self._records):
            gout = grads.pop(id(output), None)
            if gout is None:
                continue
            for t, g in zip(inputs, backward(gout)):
                if g is None or not (t.requires_grad or not t.is_leaf):
                    continue
                if not np.all(np.isfinite(g)):
                    raise GradientError(f"non-finite gradient produced by op '{name}'")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self._records.clear()
        seen = {}
        for t in leaves:
            seen[id(t)] = t
        for t in seen.values():
            g = grads.get(id(t))
            t.grad = np.zeros_like(t.data) if g is None else g.astype(np.float32)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def constant(data):
    """Leaf tensor that never requires a gradient."""
    return Tensor(data, requires_grad=False)


def _make_output(name, inputs, data, backward):
    tape = _ACTIVE_TAPE
    track = tape is not None and any(t.requires_grad or not t.is_leaf for t in inputs)
    out = Tensor(data, _leaf=not track, _check=False)
    if not np.all(np.isfinite(out.data)):
        raise ContractViolation(f"op '{name}' produced non-finite values")
    if track:
        tape._record(name, inputs, out, backward)
    return out


def _unbroadcast(g, shape):
    # reduce a broadcasted gradient back to the operand's shape
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make_output(
        "div", (a, b), a.data / b.data,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make_output("exp", (a,), out_data, lambda g: (g * out_data,))


def log(a):
    a = _as_tensor(a)
    return _make_output("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    a = _as_tensor(a)
    mask = a.data > 0
    return _make_output("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def t_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make_output("sum", (a,), out, backward)


def t_mean(a):
    a = _as_tensor(a)
    n = a.data.size
    out = a.data.sum(dtype=np.float64) / n
    return _make_output("mean", (a,), out, lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    return _make_output(
        "matmul", (a, b), a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose2d(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("transpose2d expects a 2-D tensor")
    return _make_output("transpose2d", (a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _make_output("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat_channels(a, b):
    """Concatenate two [1,C,H,W] tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[2:] != b.shape[2:]:
        raise ContractViolation("concat_channels: spatial extents differ")
    ca = a.shape[1]
    return _make_output(
        "concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def _im2col(xp, k):
    # xp: [C, Hp, Wp] padded input, k x k windows, stride 1
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    h, w = win.shape[1], win.shape[2]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w), h, w


def conv2d(x, weight, bias, padding=2):
    """Cross-correlation, stride 1, 5x5 kernels, zero padding 2.

    x: [1,Cin,H,W], weight: [Cout,Cin,5,5], bias: [Cout].
    Output keeps the spatial extents.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractViolation("conv2d expects 4-D input and weight")
    k = weight.shape[2]
    if weight.shape[2:] != (5, 5) or padding != 2:
        raise ContractViolation("conv2d is fixed at 5x5 kernels with padding 2")
    if x.shape[1] != weight.shape[1]:
        raise ContractViolation(
            f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    cout, cin = weight.shape[0], weight.shape[1]
    h, w = x.shape[2], x.shape[3]
    xp = np.pad(x.data[0], ((0, 0), (padding, padding), (padding, padding)))
    cols, _, _ = _im2col(xp, k)
    w2 = weight.data.reshape(cout, cin * k * k)
    out = (w2 @ cols + bias.data[:, None]).reshape(1, cout, h, w)

    def backward(g):
        g2 = g.reshape(cout, h * w)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1, dtype=np.float64).astype(np.float32)
        # input grad = full correlation of g with spatially flipped weights
        gp = np.pad(g.reshape(cout, h, w), ((0, 0), (padding, padding), (padding, padding)))
        gcols, _, _ = _im2col(gp, k)
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k)
        gx = (wflip @ gcols).reshape(1, cin, h, w)
        return gx, gw, gb

    return _make_output("conv2d", (x, weight, bias), out, backward)


def bilinear_sample(image, coords):
    """Sample image at normalized coordinates with border clamping.

    image: [1,C,H,W]; coords: [1,2,h,w] with channel 0 = x, channel 1 = y
    in [-1,1] (align-corners: -1 and +1 hit the border pixel centers).
    Out-of-range coordinates clamp to the border value.
    """
    image, coords = _as_tensor(image), _as_tensor(coords)
    if image.data.ndim != 4 or coords.data.ndim != 4 or coords.shape[1] != 2:
        raise ContractViolation("bilinear_sample expects [1,C,H,W] image and [1,2,h,w] coords")
    img = image.data[0]
    c, hh, ww = img.shape
    cx, cy = coords.data[0, 0], coords.data[0, 1]
    ix = (cx.astype(np.float64) + 1.0) * 0.5 * (ww - 1)
    iy = (cy.astype(np.float64) + 1.0) * 0.5 * (hh - 1)
    in_x = (ix > 0.0) & (ix < ww - 1)  # clamp kills the coordinate gradient
    in_y = (iy > 0.0) & (iy < hh - 1)
    ix = np.clip(ix, 0.0, ww - 1)
    iy = np.clip(iy, 0.0, hh - 1)
    x0 = np.minimum(np.floor(ix).astype(np.intp), max(ww - 2, 0))
    y0 = np.minimum(np.floor(iy).astype(np.intp), max(hh - 2, 0))
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    wx = (ix - x0).astype(np.float32)
    wy = (iy - y0).astype(np.float32)
    i00 = img[:, y0, x0]
    i01 = img[:, y0, x1]
    i10 = img[:, y1, x0]
    i11 = img[:, y1, x1]
    top = i00 + wx * (i01 - i00)
    bot = i10 + wx * (i11 - i10)
    out = (top + wy * (bot - top))[None]

    def backward(g):
        g = g[0]  # [C,h,w]
        w00 = (1 - wy) * (1 - wx)
        w01 = (1 - wy) * wx
        w10 = wy * (1 - wx)
        w11 = wy * wx
        gimg = np.zeros((c, hh * ww), dtype=np.float32)
        rows = np.arange(c)[:, None]
        for yk, xk, wk in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            flat = (yk * ww + xk).ravel()[None, :]
            np.add.at(gimg, (rows, flat), (g * wk).reshape(c, -1))
        dix = ((1 - wy) * (i01 - i00) + wy * (i11 - i10)) * g
        diy = ((1 - wx) * (i10 - i00) + wx * (i11 - i01)) * g
        gcx = dix.sum(axis=0) * (0.5 * (ww - 1)) * in_x
        gcy = diy.sum(axis=0) * (0.5 * (hh - 1)) * in_y
        gcoords = np.stack([gcx, gcy])[None].astype(np.float32)
        return gimg.reshape(image.shape), gcoords

    return _make_output("bilinear_sample", (image, coords), out, backward)


def _reflect_index_map(n, r):
    return np.pad(np.arange(n), r, mode="reflect")


def _corr1d_reflect(arr, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    ap = np.pad(arr, pad, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(ap, len(kernel), axis=axis)
    return np.ascontiguousarray(win @ kernel.astype(arr.dtype))


def _corr1d_adjoint_reflect(g, kernel, axis, n):
    # adjoint of reflect-pad + valid correlation along one axis
    r = len(kernel) // 2
    pad = [(0, 0)] * g.ndim
    pad[axis] = (2 * r, 2 * r)
    gp = np.pad(g, pad)
    win = np.lib.stride_tricks.sliding_window_view(gp, len(kernel), axis=axis)
    gfull = np.ascontiguousarray(win @ kernel[::-1].astype(g.dtype))  # length n + 2r
    gfull = np.moveaxis(gfull, axis, 0)
    out = np.zeros((n,) + gfull.shape[1:], dtype=g.dtype)
    np.add.at(out, _reflect_index_map(n, r), gfull)
    return np.moveaxis(out, 0, axis)


def separable_correlate(x, kernel, axes=(2, 3)):
    """Correlate with a 1-D kernel along each given axis, reflect borders."""
    x = _as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 1 or len(kernel) % 2 != 1:
        raise ContractViolation("separable_correlate expects an odd-length 1-D kernel")
    out = x.data
    for ax in axes:
        if x.shape[ax] < 1:
            raise ContractViolation("empty axis in separable_correlate")
        out = _corr1d_reflect(out, kernel, ax)

    def backward(g):
        for ax in reversed(axes):
            g = _corr1d_adjoint_reflect(g, kernel, ax, x.shape[ax])
        return (g,)

    return _make_output("separable_correlate", (x,), out, backward)


def gaussian_kernel1d(sigma):
    """Normalized Gaussian taps with radius ceil(3*sigma)."""
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    if sigma == 0:
        return np.array([1.0], dtype=np.float32)
    r = int(math.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)
