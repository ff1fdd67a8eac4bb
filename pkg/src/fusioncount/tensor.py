"""Dense NCHW tensor primitives with hand-written backward passes.

Tensors are plain rank-4 numpy arrays of shape ``(n, c, h, w)``. float32 is
the working precision; every op also accepts float64 arrays, which the
gradient checker uses. Convolutions lower to im2col + a BLAS matmul, so each
output element is reduced by a single call in a fixed order.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when a tensor's shape violates an op's contract.

    ``dim`` names the offending dimension (``"n"``, ``"c"``, ``"h"``,
    ``"w"``, ``"rank"`` ...).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


def check_tensor(x, name="input"):
    if not isinstance(x, np.ndarray):
        raise TypeError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got rank {x.ndim}", dim="rank")
    for dim, size in zip("nchw", x.shape):
        if size < 1:
            raise ShapeError(f"{name} dimension {dim} must be >= 1, got {size}", dim=dim)
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def _same_shape(a, b, op):
    if a.shape != b.shape:
        for dim, sa, sb in zip("nchw", a.shape, b.shape):
            if sa != sb:
                raise ShapeError(f"{op}: dimension {dim} differs ({sa} vs {sb})", dim=dim)
        raise ShapeError(f"{op}: shapes differ ({a.shape} vs {b.shape})", dim="rank")


@dataclass
class ConvParams:
    """Weights ``(out, in, k, k)``, bias ``(out,)`` and geometry of one conv."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        w = self.weights
        if w.ndim != 4:
            raise ShapeError(f"weights must be rank 4, got rank {w.ndim}", dim="rank")
        kh, kw = w.shape[2:]
        if kh != kw or kh not in (1, 3):
            raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}", dim="kernel")
        if self.bias.shape != (w.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {w.shape[0]} output channels",
                dim="out_channels",
            )
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be positive, padding non-negative")
        if kh == 3 and self.padding != self.dilation:
            raise ValueError("3x3 convolutions need padding == dilation")
        if kh == 1 and (self.padding != 0 or self.dilation != 1):
            raise ValueError("1x1 convolutions take padding 0 and dilation 1")

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2]

    def output_hw(self, h, w):
        k = self.kernel
        span = self.dilation * (k - 1) + 1
        return ((h + 2 * self.padding - span) // self.stride + 1,
                (w + 2 * self.padding - span) // self.stride + 1)


def _check_conv(x, p):
    check_tensor(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels, weights expect {p.in_channels}", dim="c"
        )
    ho, wo = p.output_hw(x.shape[2], x.shape[3])
    if ho < 1:
        raise ShapeError(f"conv2d: output height {ho} is not positive", dim="h")
    if wo < 1:
        raise ShapeError(f"conv2d: output width {wo} is not positive", dim="w")
    return ho, wo


def _is_pointwise(p):
    return p.kernel == 1 and p.stride == 1


def _cols(x, p):
    n, c, h, w = x.shape
    if _is_pointwise(p):
        return x.reshape(n, c, h * w)
    k = p.kernel
    return kernels.im2col(x, k, k, p.stride, p.padding, p.dilation)


def conv2d(x, p):
    ho, wo = _check_conv(x, p)
    dtype = x.dtype
    wmat = p.weights.astype(dtype, copy=False).reshape(p.out_channels, -1)
    out = np.matmul(wmat, _cols(x, p))
    out += p.bias.astype(dtype, copy=False)[None, :, None]
    return out.reshape(x.shape[0], p.out_channels, ho, wo)


def conv2d_backward(x, p, grad_out, input_grad=True):
    """Return ``(grad_input, grad_weights, grad_bias)`` for ``conv2d(x, p)``.

    ``grad_input`` is None when ``input_grad`` is false.
    """
    ho, wo = _check_conv(x, p)
    n = x.shape[0]
    expected = (n, p.out_channels, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward: grad_out shape {grad_out.shape}, expected {expected}",
                         dim="grad_out")
    dtype = x.dtype
    g = grad_out.astype(dtype, copy=False).reshape(n, p.out_channels, ho * wo)
    wmat = p.weights.astype(dtype, copy=False).reshape(p.out_channels, -1)
    cols = _cols(x, p)

    grad_b = g.sum(axis=(0, 2))
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(p.weights.shape)
    if not input_grad:
        return None, grad_w, grad_b
    grad_cols = np.matmul(wmat.T, g)
    if _is_pointwise(p):
        grad_x = grad_cols.reshape(x.shape)
    else:
        k = p.kernel
        grad_x = kernels.col2im(grad_cols, x.shape, k, k, p.stride, p.padding, p.dilation)
    return grad_x, grad_w, grad_b


def maxpool2x2(x):
    """2x2/stride-2 max-pool; returns ``(out, argmax)`` with argmax in 0..3
    (row-major position inside the window, first maximum wins)."""
    check_tensor(x)
    if x.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: height {x.shape[2]} is odd", dim="h")
    if x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: width {x.shape[3]} is odd", dim="w")
    return kernels.maxpool2x2(x)


def maxpool2x2_backward(grad_out, argmax):
    return kernels.maxpool2x2_backward(grad_out, argmax)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    # keep the open interval (0, 1) after rounding
    lo = np.finfo(x.dtype).smallest_subnormal
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    return np.clip(out, lo, hi, out=out)


def sigmoid_backward(grad_out, out):
    """Gradient through a sigmoid given its forward *output*."""
    return grad_out * out * (1 - out)


def upsample2x(x):
    """Bilinear x2 upsampling with half-pixel centres, edge-clamped."""
    check_tensor(x)
    return kernels.upsample2x(x)


def upsample2x_backward(grad_out):
    return kernels.upsample2x_backward(grad_out)


def concat_channels(a, b):
    check_tensor(a, "a")
    check_tensor(b, "b")
    for i, dim in ((0, "n"), (2, "h"), (3, "w")):
        if a.shape[i] != b.shape[i]:
            raise ShapeError(f"concat_channels: dimension {dim} differs ({a.shape[i]} vs {b.shape[i]})",
                             dim=dim)
    return np.concatenate([a, b], axis=1)


def split_channels(grad, c_first):
    """Backward of :func:`concat_channels`: split a gradient after ``c_first`` channels."""
    return np.ascontiguousarray(grad[:, :c_first]), np.ascontiguousarray(grad[:, c_first:])


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    _same_shape(a, b, "mul")
    return a * b


def add_backward(grad_out):
    return grad_out, grad_out


def sub_backward(grad_out):
    return grad_out, -grad_out


def mul_backward(grad_out, a, b):
    return grad_out * b, grad_out * a
