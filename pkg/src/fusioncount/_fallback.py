"""Pure-numpy kernels, used when the compiled ``_kernels`` extension is absent.

Every function here mirrors one in ``_kernels.pyx`` and performs its
accumulations in the same order, so both backends agree bit for bit.
"""
import numpy as np


def _out_size(size, k, stride, pad, dil):
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def im2col(x, kh, kw, stride, pad, dil):
    n, c, h, w = x.shape
    ho = _out_size(h, kh, stride, pad, dil)
    wo = _out_size(w, kw, stride, pad, dil)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for ky in range(kh):
        y0 = ky * dil
        for kx in range(kw):
            x0 = kx * dil
            cols[:, :, ky, kx] = xp[:, :, y0:y0 + stride * (ho - 1) + 1:stride,
                                    x0:x0 + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, x_shape, kh, kw, stride, pad, dil):
    n, c, h, w = x_shape
    ho = _out_size(h, kh, stride, pad, dil)
    wo = _out_size(w, kw, stride, pad, dil)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        y0 = ky * dil
        for kx in range(kw):
            x0 = kx * dil
            xp[:, :, y0:y0 + stride * (ho - 1) + 1:stride,
               x0:x0 + stride * (wo - 1) + 1:stride] += cols[:, :, ky, kx]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool2x2(x):
    n, c, h, w = x.shape
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h // 2, w // 2, 4))
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2x2_backward(grad_out, argmax):
    n, c, h2, w2 = grad_out.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    dx = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, 2 * h2, 2 * w2))


def upsample_index(size):
    """Neighbour indices and blend fractions for half-pixel x2 upsampling."""
    dst = np.arange(2 * size, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, size - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def _blend(x, axis, dtype):
    i0, i1, frac = upsample_index(x.shape[axis])
    shape = [1] * x.ndim
    shape[axis] = -1
    f = frac.astype(dtype).reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + f * (b - a)


def _unblend(g, axis, size, dtype):
    i0, i1, frac = upsample_index(size)
    shape = [1] * g.ndim
    shape[axis] = -1
    f = frac.astype(dtype).reshape(shape)
    one = dtype(1)
    out_shape = list(g.shape)
    out_shape[axis] = size
    gx = np.zeros(out_shape, dtype=dtype)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, i0, np.moveaxis((one - f) * g, axis, 0))
    np.add.at(moved, i1, np.moveaxis(f * g, axis, 0))
    return gx


def upsample2x(x):
    dtype = x.dtype.type
    return np.ascontiguousarray(_blend(_blend(x, 2, dtype), 3, dtype))


def upsample2x_backward(grad_out):
    dtype = grad_out.dtype.type
    n, c, h2, w2 = grad_out.shape
    g = _unblend(grad_out, 3, w2 // 2, dtype)
    return _unblend(g, 2, h2 // 2, dtype)
