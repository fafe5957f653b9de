"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default, float64 preserved so that
numerical oracles can run the same graph at high precision).  Every operation
records its inputs and a backward closure on the result; ``backward`` walks the
recorded graph once in reverse topological order and accumulates gradients
additively.  There is no broadcasting: binary operations require equal shapes,
and reductions that feed elementwise math hand back full-shape results
(``broadcast_mean``) or go through dedicated channel ops (``channel_affine``).
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class DomainError(ValueError):
    """Raised when values leave an operation's numeric domain (log of a
    non-positive number, division by a near-zero denominator, ...)."""


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    arr = np.atleast_1d(arr)
    if arr.size == 0 or any(e < 1 for e in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=DEFAULT_DTYPE):
        _check_shape(shape)
        return cls(np.zeros(shape, dtype=dtype), requires_grad)

    @classmethod
    def full(cls, shape, value, requires_grad=False, dtype=DEFAULT_DTYPE):
        _check_shape(shape)
        return cls(np.full(shape, value, dtype=dtype), requires_grad)

    @classmethod
    def uniform(cls, shape, lo, hi, seed, requires_grad=False, dtype=DEFAULT_DTYPE):
        """Seeded uniform fill; the same seed always yields the same bytes."""
        _check_shape(shape)
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad)

    # -- plumbing ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def _const_like(self, value) -> "Tensor":
        return Tensor(np.full(self.shape, value, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else self._const_like(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else self._const_like(other))

    def __rsub__(self, other):
        return sub(self._const_like(other), self)

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else self._const_like(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other if isinstance(other, Tensor) else self._const_like(other))

    def __rtruediv__(self, other):
        return div(self._const_like(other), self)

    def __neg__(self):
        return negate(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def pow(self, exponent):
        return pow_scalar(self, exponent)

    def sum(self):
        return reduce_sum(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _check_shape(shape):
    shape = tuple(shape)
    if len(shape) == 0 or any((not isinstance(e, (int, np.integer))) or e < 1 for e in shape):
        raise ShapeError(f"all extents must be integers >= 1, got {shape}")


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match value "
                         f"shape {t.data.shape}")
    if t.grad is None:
        # copy, never adopt: g may be a view aliasing another tensor's data,
        # and a later += into this grad must not write through it
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# -- elementwise binary ------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _result(ad * bd, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    if np.any(np.abs(b.data) < 1e-12):
        bad = int(np.argmax(np.abs(b.data.reshape(-1)) < 1e-12))
        raise DomainError(f"div: |denominator| < 1e-12 (first flat position {bad})")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        _accum(a, g / bd)
        _accum(b, -g * ad / (bd * bd))

    return _result(out, (a, b), backward)


# -- elementwise unary -------------------------------------------------------

def negate(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, -g)

    return _result(-x.data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    # np.maximum rather than np.where(mask, ...): the latter would map NaN to
    # 0 (nan > 0 is False) and hide a diverged forward pass from the trainer
    return _result(np.maximum(x.data, 0), (x,), backward)


# sigmoid saturates to exactly 0.0/1.0 in float arithmetic for large |x|;
# the output is pinched into (0, 1) so downstream logs stay finite.
_SIGMOID_MARGIN = 1e-7


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    np.clip(out, _SIGMOID_MARGIN, 1.0 - _SIGMOID_MARGIN, out=out)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: inputs must be strictly positive")
    out = np.log(x.data)

    def backward(g):
        _accum(x, g / x.data)

    return _result(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        _accum(x, g * (2.0 * xd))

    return _result(xd * xd, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through only inside the band."""
    if not lo < hi:
        raise DomainError(f"clamp: need lo < hi, got {lo}, {hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        _accum(x, g * inside)

    return _result(out, (x,), backward)


def pow_scalar(x: Tensor, exponent: float) -> Tensor:
    """x ** exponent for a python-scalar exponent; non-integer exponents
    require strictly positive inputs."""
    if float(exponent) != int(exponent) and np.any(x.data <= 0):
        raise DomainError("pow_scalar: fractional exponent needs positive inputs")
    xd = x.data
    out = xd ** exponent

    def backward(g):
        _accum(x, g * (exponent * xd ** (exponent - 1.0)))

    return _result(out, (x,), backward)


# -- reductions and shape ops -------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements, returned as a shape-(1,) tensor."""
    out = x.data.sum(dtype=x.data.dtype).reshape(1)

    def backward(g):
        _accum(x, np.full(x.shape, g[0], dtype=x.data.dtype))

    return _result(out, (x,), backward)


def broadcast_mean(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Group mean broadcast back to the input shape.

    Every element of the result holds the mean of its reduction group, so the
    output shape equals the input shape and elementwise ops stay legal without
    broadcasting.
    """
    axes = tuple(sorted(axes))
    if any(a < 0 or a >= x.data.ndim for a in axes) or len(set(axes)) != len(axes):
        raise ShapeError(f"broadcast_mean: bad axes {axes} for rank {x.data.ndim}")
    n = 1
    for a in axes:
        n *= x.shape[a]
    m = x.data.mean(axis=axes, keepdims=True)
    out = np.broadcast_to(m, x.shape).copy()

    def backward(g):
        gsum = g.sum(axis=axes, keepdims=True) / n
        _accum(x, np.broadcast_to(gsum, x.shape).copy())

    return _result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape} changes element count")

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {x.data.ndim}")
    inverse = np.argsort(axes)

    def backward(g):
        _accum(x, g.transpose(inverse))

    # a strided view is fine for every downstream op; copying here would add
    # a full pass over attention-sized arrays
    return _result(x.data.transpose(axes), (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels: inputs must be rank-4 NCHW")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape}, {b.shape}")
    ca = a.shape[1]

    def backward(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) from an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError("slice_channels: input must be rank-4 NCHW")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels: bad range [{start}, {stop}) for C={x.shape[1]}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accum(x, full)

    return _result(x.data[:, start:stop].copy(), (x,), backward)


# -- matmul / softmax (attention support) -------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: (M,K)@(K,N) or batched (B,M,K)@(B,K,N)."""
    ad, bd = a.data, b.data
    if ad.ndim == bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner extents differ: {ad.shape} @ {bd.shape}")
    elif ad.ndim == bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {ad.shape} @ {bd.shape}")
    else:
        raise ShapeError(f"matmul: ranks must both be 2 or both 3, got {ad.ndim}, {bd.ndim}")
    swap = (0, 2, 1) if ad.ndim == 3 else (1, 0)

    def backward(g):
        _accum(a, g @ bd.transpose(swap))
        _accum(b, ad.transpose(swap) @ g)

    return _result(ad @ bd, (a, b), backward)


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    out = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)                        # fresh array, in-place is safe
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * out
        gy -= out * gy.sum(axis=-1, keepdims=True)
        _accum(x, gy)

    return _result(out, (x,), backward)


def scale_by_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a learnable shape-(1,) scalar."""
    if s.size != 1:
        raise ShapeError(f"scale_by_scalar: scale must have one element, got {s.shape}")
    sv = s.data.reshape(-1)[0]

    def backward(g):
        _accum(x, g * sv)
        _accum(s, np.array([(g * x.data).sum()], dtype=s.data.dtype))

    return _result(x.data * sv, (x, s), backward)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y[n,c,h,w] = x[n,c,h,w] * scale[c] + shift[c] on NCHW."""
    if x.data.ndim != 4:
        raise ShapeError("channel_affine: input must be rank-4 NCHW")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"channel_affine: scale/shift must have shape ({c},), got {scale.shape}, {shift.shape}")
    sd = scale.data.reshape(1, c, 1, 1)

    def backward(g):
        _accum(x, g * sd)
        _accum(scale, (g * x.data).sum(axis=(0, 2, 3)))
        _accum(shift, g.sum(axis=(0, 2, 3)))

    return _result(x.data * sd + shift.data.reshape(1, c, 1, 1), (x, scale, shift), backward)


# -- convolution family --------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output would be empty for input {(h, w)}, "
                         f"kernel {(kh, kw)}, stride {stride}, padding {padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError("conv2d: geometry does not tile the input exactly")
    return oh, ow


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    n, c, h, w = shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an (O,C,kh,kw) kernel.

    Internally an im2col + matmul so the training loop rides BLAS; the naive
    nested-loop definition lives in the test suite as the independent oracle.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d: x must be NCHW and weight (O,C,kh,kw)")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: weight expects {cw} input channels, got {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride {stride} or padding {padding}")
    oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (N, C*kh*kw, OH*OW)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols)                          # (N, O, OH*OW)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)
    out = out.reshape(n, o, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(n, o, oh * ow)
        if weight.requires_grad:
            _accum(weight, np.einsum("nol,nkl->ok", gm, cols,
                                     optimize=True).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, gm.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gm)                # (N, C*kh*kw, OH*OW)
            _accum(x, _col2im(dcols, x.shape, kh, kw, stride, padding, oh, ow))

    return _result(out, parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution, restricted to stride 2 with a 2x2 kernel
    (the only upsampling geometry the decoders use).  Weight is (C_in, C_out, 2, 2).
    Output is (N, C_out, 2H, 2W); with this geometry every output pixel receives
    exactly one contribution, so there is no overlap-add.
    """
    if stride != 2:
        raise ShapeError(f"transposed_conv2d: only stride 2 is supported, got {stride}")
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError("transposed_conv2d: x must be NCHW and weight (C_in,C_out,2,2)")
    n, c, h, w = x.shape
    cin, cout = weight.shape[:2]
    if cin != c:
        raise ShapeError(f"transposed_conv2d: weight expects {cin} input channels, got {c}")

    out = np.empty((n, cout, 2 * h, 2 * w), dtype=x.data.dtype)
    for di in range(2):
        for dj in range(2):
            out[:, :, di::2, dj::2] = np.einsum(
                "nchw,co->nohw", x.data, weight.data[:, :, di, dj], optimize=True)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for di in range(2):
                for dj in range(2):
                    gx += np.einsum("nohw,co->nchw", g[:, :, di::2, dj::2],
                                    weight.data[:, :, di, dj], optimize=True)
            _accum(x, gx)
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for di in range(2):
                for dj in range(2):
                    gw[:, :, di, dj] = np.einsum(
                        "nchw,nohw->co", x.data, g[:, :, di::2, dj::2], optimize=True)
            _accum(weight, gw)

    return _result(out, (x, weight), backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    maximal element in row-major window order."""
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d: input must be rank-4 NCHW")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: H and W must be even, got {(h, w)}; pad inputs "
                         f"to multiples of the pooling factor first")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5) \
                    .reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)                        # first max wins ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        _accum(x, gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                    .reshape(n, c, h, w))

    return _result(out, (x,), backward)


# -- backward pass -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into ``grad`` for every reachable tensor that
    requires gradients.  ``loss`` must be a single-element tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tracked tensor")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    The check always runs in float64 (inputs are upcast) so the difference
    quotient itself is trustworthy at the tolerances the suite asserts; the
    operations under test are the same code either way.  Returns the maximum
    per-coordinate relative error.
    """
    if not 1e-7 <= h <= 1e-2:
        raise DomainError(f"finite_diff_check: step {h} outside sane range")
    x0 = x.data.astype(np.float64)

    probe = Tensor(x0.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("finite_diff_check: f must return a scalar tensor")
    backward(out)
    analytic = (probe.grad if probe.grad is not None else np.zeros_like(x0)).reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = f(Tensor(bumped.reshape(x0.shape))).item()
        bumped[i] = flat[i] - h
        f_minus = f(Tensor(bumped.reshape(x0.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))
