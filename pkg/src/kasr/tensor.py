"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap a numpy array plus an optional gradient. Every operation that
participates in training records a backward closure; calling ``backward()``
on a scalar loss walks the recorded graph in reverse topological order and
accumulates gradients into every reachable tensor with ``requires_grad``.

Conventions:
  * no implicit broadcasting between tensors (scalars are fine),
  * reductions always collapse to a scalar,
  * tie-breaking for max/min routing picks the first element in row-major
    order, so repeated runs are bit-identical,
  * ``sqrt`` adds 1e-12 to its operand so gradients stay finite at zero.
"""

from __future__ import annotations

import contextlib

import numpy as np

SQRT_EPS = 1e-12

_grad_enabled = True


class DimensionError(ValueError):
    """Shape mismatch between operands; names the offending axis."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward passes only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Backpropagate from a scalar loss through the recorded graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node in visited:
                continue
            visited.add(node)
            stack.append((node, True))
            for child in node._prev:
                if child not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are the only permitted broadcast.
    def __add__(self, other):
        return scalar_add(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return scalar_add(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scalar_mul(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("tensor division only supports scalar divisors")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _track(out, inputs, backward_fn):
    """Attach graph bookkeeping to ``out`` when gradients are live."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._prev = tuple(inputs)
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        sa, sb = a.data.shape, b.data.shape
        if len(sa) != len(sb):
            raise DimensionError(
                f"{op}: rank mismatch {sa} vs {sb}", axis=min(len(sa), len(sb))
            )
        axis = next(i for i, (x, y) in enumerate(zip(sa, sb)) if x != y)
        raise DimensionError(
            f"{op}: shape mismatch on axis {axis}: {sa} vs {sb}", axis=axis
        )


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    return _track(out, (a, b), backward)


def sub(a, b):
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    return _track(out, (a, b), backward)


def mul(a, b):
    """Elementwise (Hadamard) product."""
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward():
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    return _track(out, (a, b), backward)


def scalar_mul(a, c):
    c = float(c)
    out = Tensor(a.data * c)

    def backward():
        _accumulate(a, out.grad * c)

    return _track(out, (a,), backward)


def scalar_add(a, c):
    c = float(c)
    out = Tensor(a.data + c)

    def backward():
        _accumulate(a, out.grad)

    return _track(out, (a,), backward)


def abs_(a):
    out = Tensor(np.abs(a.data))

    def backward():
        _accumulate(a, out.grad * np.sign(a.data))

    return _track(out, (a,), backward)


def square(a):
    out = Tensor(a.data * a.data)

    def backward():
        _accumulate(a, out.grad * (2.0 * a.data))

    return _track(out, (a,), backward)


def sqrt(a):
    """sqrt(x + 1e-12); the offset keeps the gradient finite at x == 0."""
    root = np.sqrt(a.data + SQRT_EPS)
    out = Tensor(root)

    def backward():
        _accumulate(a, out.grad * (0.5 / root))

    return _track(out, (a,), backward)


def softplus(a):
    """log(1 + exp(x)), evaluated in its overflow-safe form."""
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def backward():
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))  # sigmoid without overflow
        _accumulate(a, out.grad * sig.astype(x.dtype))

    return _track(out, (a,), backward)


def mean(a):
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))

    def backward():
        _accumulate(a, np.full_like(a.data, out.grad / a.data.size))

    return _track(out, (a,), backward)


def sum_(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def backward():
        _accumulate(a, np.full_like(a.data, out.grad))

    return _track(out, (a,), backward)


def _extremum(a, argfn):
    flat_idx = argfn(a.data)  # first extremal element in row-major order
    out = Tensor(np.asarray(a.data.reshape(-1)[flat_idx], dtype=a.dtype))

    def backward():
        g = np.zeros_like(a.data)
        g.reshape(-1)[flat_idx] = out.grad
        _accumulate(a, g)

    return _track(out, (a,), backward)


def min_all(a):
    return _extremum(a, np.argmin)


def max_all(a):
    return _extremum(a, np.argmax)


def clamp(a, lo, hi):
    out = Tensor(np.clip(a.data, lo, hi))

    def backward():
        inside = (a.data >= lo) & (a.data <= hi)
        _accumulate(a, out.grad * inside)

    return _track(out, (a,), backward)


def concat_channels(tensors):
    """Concatenate 4D tensors along the channel axis."""
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or s[0] != ref[0] or s[2:] != ref[2:]:
            raise DimensionError(
                f"concat_channels: incompatible shapes {ref} vs {s}", axis=0
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def backward():
        for t, g in zip(tensors, np.split(out.grad, splits, axis=1)):
            _accumulate(t, g)

    return _track(out, tuple(tensors), backward)


def flip_h(a):
    out = Tensor(np.ascontiguousarray(a.data[..., ::-1]))

    def backward():
        _accumulate(a, out.grad[..., ::-1])

    return _track(out, (a,), backward)


def flip_v(a):
    out = Tensor(np.ascontiguousarray(a.data[..., ::-1, :]))

    def backward():
        _accumulate(a, out.grad[..., ::-1, :])

    return _track(out, (a,), backward)


def rot90(a, k=1):
    """Rotate the two trailing (spatial) axes by k quarter turns."""
    out = Tensor(np.ascontiguousarray(np.rot90(a.data, k, axes=(-2, -1))))

    def backward():
        _accumulate(a, np.rot90(out.grad, -k, axes=(-2, -1)))

    return _track(out, (a,), backward)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def backward():
        _accumulate(a, out.grad.reshape(a.data.shape))

    return _track(out, (a,), backward)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride):
    """(B,C,H,W) -> (B, C*kh*kw, oh*ow) patch matrix.

    Built with kh*kw strided slice copies so no transposed reshape of a
    strided view is ever materialized.
    """
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = x[
                :, :, u : u + stride * oh : stride, v : v + stride * ow : stride
            ]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2D cross-correlation of a (B,C,H,W) batch with (O,C,kh,kw) filters.

    Output spatial dims follow floor((H + 2*padding - kh)/stride) + 1.
    Gradients are defined for the input, the filter weights and the bias.
    """
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride={stride}, padding={padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4D input and weight, got {x.shape} and {weight.shape}"
        )
    b, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise DimensionError(
            f"conv2d: channel axis 1 mismatch: input has {c}, weight expects {ic}",
            axis=1,
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}", axis=2
        )
    if bias is not None and bias.shape != (oc,):
        raise DimensionError(
            f"conv2d: bias shape {bias.shape} != ({oc},)", axis=0
        )

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, oh, ow = _im2col(xd, kh, kw, stride)  # (B, C*kh*kw, L)
    w2 = weight.data.reshape(oc, ic * kh * kw)
    out_data = (w2 @ cols).reshape(b, oc, oh, ow)
    if bias is not None:
        out_data += bias.data[:, None, None]
    out = Tensor(out_data)

    def backward():
        g2 = out.grad.reshape(b, oc, oh * ow)  # (B, O, L)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(b, ic, kh, kw, oh, ow)
            gpad = np.zeros((b, c, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[
                        :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                    ] += gcols[:, :, i, j]
            if padding:
                gpad = gpad[:, :, padding : padding + h, padding : padding + w]
            _accumulate(x, gpad)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, inputs, backward)


def maxpool2d(x, window, stride):
    """Max pooling; the gradient routes to the first argmax per window."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: need 4D input, got {x.shape}")
    b, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(
            f"maxpool2d: window {window} exceeds input {h}x{w}", axis=2
        )
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sb, sc, sh, sw = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(b, c, oh, ow, window, window),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    flat = windows.reshape(b, c, oh, ow, window * window)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def backward():
        gin = np.zeros_like(x.data)
        bi, ci, yi, xi = np.indices((b, c, oh, ow))
        rows = yi * stride + arg // window
        cols = xi * stride + arg % window
        np.add.at(gin, (bi, ci, rows, cols), out.grad)
        _accumulate(x, gin)

    return _track(out, (x,), backward)


def leaky_relu(x, slope=0.2):
    """x for x > 0, slope * x otherwise."""
    if not np.isfinite(slope):
        raise ContractError(f"leaky_relu: slope must be finite, got {slope}")
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope * x.data))

    def backward():
        _accumulate(x, out.grad * np.where(pos, 1.0, slope).astype(x.dtype))

    return _track(out, (x,), backward)


def depth_to_space(x, block):
    """(B, C*block^2, H, W) -> (B, C, H*block, W*block) sub-pixel shuffle."""
    b, c, h, w = x.shape
    if c % (block * block) != 0:
        raise DimensionError(
            f"depth_to_space: channels {c} not divisible by block^2={block * block}",
            axis=1,
        )
    co = c // (block * block)
    out_data = (
        x.data.reshape(b, co, block, block, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, co, h * block, w * block)
    )
    out = Tensor(np.ascontiguousarray(out_data))

    def backward():
        g = (
            out.grad.reshape(b, co, h, block, w, block)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(b, c, h, w)
        )
        _accumulate(x, np.ascontiguousarray(g))

    return _track(out, (x,), backward)


def space_to_depth(x, block):
    """Inverse of depth_to_space."""
    b, c, h, w = x.shape
    if h % block or w % block:
        raise DimensionError(
            f"space_to_depth: spatial dims {h}x{w} not divisible by {block}", axis=2
        )
    out_data = (
        x.data.reshape(b, c, h // block, block, w // block, block)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, c * block * block, h // block, w // block)
    )
    out = Tensor(np.ascontiguousarray(out_data))

    def backward():
        g = (
            out.grad.reshape(b, c, block, block, h // block, w // block)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(b, c, h, w)
        )
        _accumulate(x, np.ascontiguousarray(g))

    return _track(out, (x,), backward)


def pad_reflect2d(x, pad):
    """Reflect-pad the two trailing axes (no edge duplication)."""
    b, c, h, w = x.shape
    if pad >= h or pad >= w:
        raise DimensionError(f"pad_reflect2d: pad {pad} too large for {h}x{w}", axis=2)
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect"))

    iy = _reflect_index(np.arange(-pad, h + pad), h)
    ix = _reflect_index(np.arange(-pad, w + pad), w)

    def backward():
        gin = np.zeros_like(x.data)
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gin, (bi, ci, iy[None, None, :, None], ix[None, None, None, :]), out.grad)
        _accumulate(x, gin)

    return _track(out, (x,), backward)


def _reflect_index(idx, n):
    """Map out-of-range indices to their mirror position inside [0, n)."""
    idx = np.abs(idx)
    period = 2 * (n - 1) if n > 1 else 1
    idx = idx % period
    return np.where(idx >= n, period - idx, idx)
