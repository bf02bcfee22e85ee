"""Reverse-mode automatic differentiation on numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order together with a closure that maps the output gradient to
input gradients.  :func:`backward` replays the tape in reverse.

Conventions
-----------
* All values are float64.
* ``conv2d`` is a cross-correlation (the kernel is not flipped).
* Image batches are ``(N, C, H, W)``; samplers use channels-last
  ``(N, H, W, C)`` images and ``(N, H, W, 2)`` coordinates ordered (row, col).
"""
from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.2

_active_tapes: list["Tape"] = []


class ConfigurationError(ValueError):
    """Raised when an operation is configured inconsistently with its input."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an activation contains NaN or Inf."""


class Tensor:
    """An n-dimensional float64 array that can take part in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and Adam state."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors that require gradients
    are appended while the tape is active.  ``check_finite`` turns on the
    debug check that raises :class:`NonFiniteError` on NaN/Inf activations.
    """

    def __init__(self, check_finite=False):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def _tape():
    return _active_tapes[-1] if _active_tapes else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn):
    """Wrap ``out_data`` and register ``backward_fn`` if any input needs it.

    ``backward_fn(g)`` returns one gradient (or None) per input.
    """
    tape = _tape()
    out = Tensor(out_data)
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite activation")
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape, loss, params=None):
    """Back-propagate the scalar ``loss`` through ``tape``.

    Gradients are accumulated into ``Parameter.grad``; every tensor that
    requires a gradient gets its ``grad`` set.  If ``params`` is given, the
    list of their gradients is returned (zero for unreached parameters).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves left in the map are tensors not produced on this tape
    leaves = {}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) in grads:
                leaves[id(inp)] = inp
    if id(loss) in grads and loss.requires_grad:
        leaves.setdefault(id(loss), loss)
    for key, t in leaves.items():
        g = grads[key]
        if isinstance(t, Parameter):
            t.grad = t.grad + g
        else:
            t.grad = g
    if params is None:
        return None
    out = []
    for p in params:
        if isinstance(p, Parameter):
            out.append(p.grad)
        else:
            out.append(p.grad if p.grad is not None else np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x):
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def exp(x):
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x):
    y = np.sqrt(x.data)
    return _record(y, (x,), lambda g: (0.5 * g / y,))


def tanh(x):
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(x, alpha=LEAKY_SLOPE):
    xd = x.data
    slope = np.where(xd > 0, 1.0, alpha)
    return _record(xd * slope, (x,), lambda g: (g * slope,))


def activation(x, kind, alpha=LEAKY_SLOPE):
    """Elementwise nonlinearity: ``leaky_relu``, ``tanh`` or ``exp``."""
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "exp":
        return exp(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------- reductions

def sum_all(x):
    shape = x.shape
    return _record(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(x, axis, keepdims=False):
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean_axis(x, axis, keepdims=False):
    n = x.shape[axis]
    return mul(sum_axis(x, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------- shape changes

def reshape(x, shape):
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def broadcast_to(x, shape):
    old = x.shape
    return _record(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, old),))


# --------------------------------------------------------------------- linear

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    # promote vectors to matrices for the backward pass, as np.matmul does
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd

    def bw(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if ga.ndim > a2.ndim:
                ga = ga.reshape(-1, *a2.shape).sum(axis=0)
            ga = ga.reshape(ad.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            if gb.ndim > b2.ndim:
                gb = gb.reshape(-1, *b2.shape).sum(axis=0)
            gb = gb.reshape(bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def fully_connected(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"fully_connected: input has {x.shape[-1]} features, "
                         f"weight expects {weight.shape[0]}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def linear_along_axis(x, matrix, axis):
    """Apply the constant matrix ``matrix`` (n_out, n_in) along ``axis`` of ``x``."""
    m = np.asarray(matrix, dtype=np.float64)

    def fwd(a, mat):
        moved = np.moveaxis(a, axis, -1)
        return np.moveaxis(moved @ mat.T, -1, axis)

    return _record(fwd(x.data, m), (x,), lambda g: (fwd(g, m.T),))


# -------------------------------------------------------------- convolutions

def _same_pad(k):
    return (k - 1) // 2


def _check_conv(x, kernel, c_axis=1):
    if kernel.shape[1] != x.shape[c_axis]:
        raise ValueError(f"kernel expects {kernel.shape[1]} input channels, "
                         f"input has {x.shape[c_axis]}")


def _im2col(xp, k, stride, out_hw):
    """(N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo) patches, tap-major within a channel."""
    n, c = xp.shape[:2]
    ho, wo = out_hw
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride,
                                  j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _out_hw(hp, wp, k, stride):
    return (hp - k) // stride + 1, (wp - k) // stride + 1


def _conv2d_raw(x, w, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    o, _, k, _ = w.shape
    ho, wo = _out_hw(xp.shape[2], xp.shape[3], k, stride)
    cols = _im2col(xp, k, stride, (ho, wo))
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(x.shape[0], o, ho, wo), cols


def _conv2d_input_adjoint(g, w, stride, pad, in_hw):
    """Gradient of conv2d w.r.t. its input: also the transpose convolution."""
    n, o, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    hp, wp = in_hw[0] + 2 * pad, in_hw[1] + 2 * pad
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo)).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad:pad + in_hw[0], pad:pad + in_hw[1]]
    return dxp


def _conv2d_kernel_grad(cols, g, kernel_shape):
    n, o = g.shape[:2]
    gw = np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(kernel_shape)


def conv2d(x, kernel, stride=1, padding="same", bias=None):
    """2-D cross-correlation of ``x`` (N, C_in, H, W) with ``kernel`` (C_out, C_in, k, k).

    ``padding="same"`` zero-pads by (k-1)/2 so that the output extent is
    ceil(H / stride).
    """
    _check_conv(x, kernel)
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    pad = _same_pad(k) if padding == "same" else 0
    out, cols = _conv2d_raw(x.data, kernel.data, stride, pad)
    in_hw = x.shape[2:]
    wd = kernel.data

    def bw(g):
        gx = _conv2d_input_adjoint(g, wd, stride, pad, in_hw) if x.requires_grad else None
        gw = _conv2d_kernel_grad(cols, g, wd.shape) if kernel.requires_grad else None
        return gx, gw

    y = _record(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


def conv_transpose2d(x, kernel, stride=2, bias=None):
    """Transpose of ``conv2d(., kernel, stride, "same")`` for inputs of twice the extent.

    ``kernel`` has the shape of the forward convolution's kernel, i.e.
    (C_in of ``x``, C_out, k, k); the output is (N, C_out, 2H, 2W).
    """
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(f"kernel expects {kernel.shape[0]} input channels, "
                         f"input has {x.shape[1]}")
    if stride != 2:
        raise ValueError("conv_transpose2d supports stride 2 only")
    k = kernel.shape[-1]
    pad = _same_pad(k)
    out_hw = (2 * x.shape[2], 2 * x.shape[3])
    xd, wd = x.data, kernel.data
    out = _conv2d_input_adjoint(xd, wd, stride, pad, out_hw)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gx = _conv2d_raw(g, wd, stride, pad)[0]
        if kernel.requires_grad:
            padded = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            cols = _im2col(padded, k, stride, xd.shape[2:])
            gk = _conv2d_kernel_grad(cols, xd, wd.shape)
        return gx, gk

    y = _record(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1, 1)))
    return y


def conv1d_dilated(x, kernel, dilation=1, bias=None):
    """Non-causal dilated 1-D convolution with symmetric zero padding.

    ``x`` is (C, T) or (N, C, T); ``kernel`` is (C_out, C, 3).  The output
    keeps length T.  A dilation at least as long as the sequence leaves only
    the centre tap in range and is rejected.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _check_conv(x, kernel)
    t_len = x.shape[-1]
    if dilation >= t_len:
        raise ConfigurationError(f"dilation {dilation} exceeds sequence length {t_len}")
    taps = kernel.shape[-1]
    half = taps // 2
    pad = half * dilation
    xd, wd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    windows = [xp[:, :, j * dilation:j * dilation + t_len] for j in range(taps)]
    out = sum(np.einsum("oc,nct->not", wd[:, :, j], windows[j]) for j in range(taps))

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(taps):
                gxp[:, :, j * dilation:j * dilation + t_len] += np.einsum("oc,not->nct", wd[:, :, j], g)
            gx = gxp[:, :, pad:pad + t_len]
        if kernel.requires_grad:
            gw = np.stack([np.einsum("not,nct->oc", g, windows[j]) for j in range(taps)], axis=-1)
        return gx, gw

    y = _record(out, (x, kernel), bw)
    if bias is not None:
        y = add(y, reshape(bias, (1, -1, 1)))
    return reshape(y, y.shape[1:]) if squeeze else y


def spatial_dropout1d(x, rate, rng, training=True):
    """Zero whole channels of a (C, T) or (N, C, T) input, rescaling survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    shape = list(x.shape)
    shape[-1] = 1
    keep = (rng.random(shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ------------------------------------------------------------------- sampling

def _bilinear_setup(coords, h, w):
    # non-finite coordinates index pixel 0 with NaN weights, so NaN propagates
    y = np.clip(coords[..., 0], 0.0, h - 1.0)
    x = np.clip(coords[..., 1], 0.0, w - 1.0)
    y0 = np.where(np.isfinite(y), y, 0.0)
    x0 = np.where(np.isfinite(x), x, 0.0)
    y0 = np.clip(np.floor(y0), 0, max(h - 2, 0)).astype(np.intp)
    x0 = np.clip(np.floor(x0), 0, max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    inside_y = (coords[..., 0] >= 0.0) & (coords[..., 0] <= h - 1.0)
    inside_x = (coords[..., 1] >= 0.0) & (coords[..., 1] <= w - 1.0)
    return y0, y1, x0, x1, fy, fx, inside_y, inside_x


def bilinear_sample(image, coords):
    """Sample ``image`` at continuous pixel ``coords`` with bilinear weights.

    ``image`` is (N, H, W, C) (or (H, W), treated as one channel of batch
    one); ``coords`` is (N, H', W', 2) in (row, col) order, or (H', W', 2).
    Image batch 1 is shared by all coordinate batches.  Coordinates outside
    the grid are clamped to the border, where the coordinate gradient is
    zero.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    img = image.data
    squeeze_img = img.ndim == 2
    if squeeze_img:
        img = img[None, :, :, None]
    cd = coords.data
    squeeze_c = cd.ndim == 3
    if squeeze_c:
        cd = cd[None]
    n_img, h, w, c = img.shape
    n = cd.shape[0]
    if n_img not in (1, n):
        raise ValueError("image batch must be 1 or match the coordinate batch")
    y0, y1, x0, x1, fy, fx, iny, inx = _bilinear_setup(cd, h, w)
    bidx = np.zeros(n, dtype=np.intp) if n_img == 1 else np.arange(n)
    bidx = bidx[:, None, None]
    v00 = img[bidx, y0, x0]
    v01 = img[bidx, y0, x1]
    v10 = img[bidx, y1, x0]
    v11 = img[bidx, y1, x1]
    wy, wx = fy[..., None], fx[..., None]
    out = (v00 * (1 - wy) * (1 - wx) + v01 * (1 - wy) * wx
           + v10 * wy * (1 - wx) + v11 * wy * wx)

    def bw(g):
        if squeeze_img:
            g = g[..., None]
        if squeeze_c:
            g = g[None]
        gimg = gc = None
        if image.requires_grad:
            flat = np.zeros(n_img * h * w * c)
            chan = np.arange(c)
            for yy, xx, wgt in ((y0, x0, (1 - wy) * (1 - wx)), (y0, x1, (1 - wy) * wx),
                                (y1, x0, wy * (1 - wx)), (y1, x1, wy * wx)):
                idx = ((bidx * h + yy) * w + xx)[..., None] * c + chan
                flat += np.bincount(idx.ravel(), weights=(g * wgt).ravel(), minlength=flat.size)
            gimg = flat.reshape(n_img, h, w, c)
            if squeeze_img:
                gimg = gimg[0, :, :, 0]
        if coords.requires_grad:
            dy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx)
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy)
            gy = np.sum(g * dy, axis=-1) * iny
            gx = np.sum(g * dx, axis=-1) * inx
            gc = np.stack([gy, gx], axis=-1)
            if squeeze_c:
                gc = gc[0]
        return gimg, gc

    if squeeze_img:
        out = out[..., 0]
    if squeeze_c:
        out = out[0]
    return _record(out, (image, coords), bw)


# ------------------------------------------------------------------ optimizer

def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with bias correction, using each parameter's ``grad``.

    L2 decay enters the gradient as ``weight_decay * w``.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def zero_grads(params):
    for p in params:
        p.zero_grad()
