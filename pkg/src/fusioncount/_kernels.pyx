# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled data-movement kernels: dilated im2col/col2im, 2x2 max-pool and
half-pixel bilinear x2 upsampling, forward and backward.

Loop orders match ``_fallback`` so per-element accumulation is identical.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline Py_ssize_t _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride,
                                 Py_ssize_t pad, Py_ssize_t dil) nogil:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


cdef inline void _valid_cols(Py_ssize_t kx, Py_ssize_t w, Py_ssize_t wo, Py_ssize_t stride,
                             Py_ssize_t pad, Py_ssize_t dil, Py_ssize_t* lo,
                             Py_ssize_t* hi) noexcept nogil:
    # output columns ox whose source column ox*stride + kx*dil - pad is inside [0, w)
    cdef Py_ssize_t t = pad - kx * dil
    cdef Py_ssize_t u = w - 1 - kx * dil + pad
    lo[0] = 0 if t <= 0 else (t + stride - 1) // stride
    hi[0] = 0 if u < 0 else u // stride + 1
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


cdef void _im2col(const floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t dil, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy, off, lo, hi
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef const floating* src
    cdef floating* dst
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for ky in range(kh):
                for kx in range(kw):
                    _valid_cols(kx, w, wo, stride, pad, dil, &lo, &hi)
                    off = kx * dil - pad
                    dst = &cols[n, (c * kh + ky) * kw + kx, 0]
                    for oy in range(ho):
                        iy = oy * stride + ky * dil - pad
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                dst[ox] = 0
                        else:
                            src = &x[n, c, iy, 0]
                            for ox in range(lo):
                                dst[ox] = 0
                            if stride == 1:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox + off]
                            else:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox * stride + off]
                            for ox in range(hi, wo):
                                dst[ox] = 0
                        dst += wo


cdef void _col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] dx,
                  Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t dil, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, ky, kx, oy, ox, iy, off, lo, hi
    cdef Py_ssize_t h = dx.shape[2], w = dx.shape[3]
    cdef const floating* src
    cdef floating* dst
    for n in range(dx.shape[0]):
        for c in range(dx.shape[1]):
            for ky in range(kh):
                for kx in range(kw):
                    _valid_cols(kx, w, wo, stride, pad, dil, &lo, &hi)
                    off = kx * dil - pad
                    src = &cols[n, (c * kh + ky) * kw + kx, 0]
                    for oy in range(ho):
                        iy = oy * stride + ky * dil - pad
                        if 0 <= iy < h:
                            dst = &dx[n, c, iy, 0]
                            for ox in range(lo, hi):
                                dst[ox * stride + off] += src[ox]
                        src += wo


def im2col(x, int kh, int kw, int stride, int pad, int dil):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t ho = _out_size(x.shape[2], kh, stride, pad, dil)
    cdef Py_ssize_t wo = _out_size(x.shape[3], kw, stride, pad, dil)
    cols = np.empty((x.shape[0], x.shape[1] * kh * kw, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, dil, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, dil, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, x_shape, int kh, int kw, int stride, int pad, int dil):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = x_shape
    cdef Py_ssize_t ho = _out_size(h, kh, stride, pad, dil)
    cdef Py_ssize_t wo = _out_size(w, kw, stride, pad, dil)
    dx = np.zeros((n, c, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, dx, kh, kw, stride, pad, dil, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, dx, kh, kw, stride, pad, dil, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return dx


cdef void _maxpool(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                   cnp.int8_t[:, :, :, ::1] arg) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, k
    cdef floating best, v
    cdef cnp.int8_t besti
    for n in range(out.shape[0]):
        for c in range(out.shape[1]):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    best = x[n, c, 2 * i, 2 * j]
                    besti = 0
                    for k in range(1, 4):
                        v = x[n, c, 2 * i + k // 2, 2 * j + k % 2]
                        if v > best:
                            best = v
                            besti = <cnp.int8_t>k
                    out[n, c, i, j] = best
                    arg[n, c, i, j] = besti


cdef void _maxpool_bwd(const floating[:, :, :, ::1] g, const cnp.int8_t[:, :, :, ::1] arg,
                       floating[:, :, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, k
    for n in range(g.shape[0]):
        for c in range(g.shape[1]):
            for i in range(g.shape[2]):
                for j in range(g.shape[3]):
                    k = arg[n, c, i, j]
                    dx[n, c, 2 * i + k // 2, 2 * j + k % 2] = g[n, c, i, j]


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    if x.dtype == np.float32:
        _maxpool[float](x, out, arg)
    else:
        _maxpool[double](x, out, arg)
    return out, arg


def maxpool2x2_backward(grad_out, argmax):
    grad_out = np.ascontiguousarray(grad_out)
    argmax = np.ascontiguousarray(argmax, dtype=np.int8)
    n, c, h2, w2 = grad_out.shape
    dx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=grad_out.dtype)
    if grad_out.dtype == np.float32:
        _maxpool_bwd[float](grad_out, argmax, dx)
    else:
        _maxpool_bwd[double](grad_out, argmax, dx)
    return dx


cdef void _index(Py_ssize_t size, Py_ssize_t[::1] i0, Py_ssize_t[::1] i1,
                 double[::1] frac) noexcept nogil:
    cdef Py_ssize_t d, a
    cdef double src
    for d in range(2 * size):
        src = (d + 0.5) / 2.0 - 0.5
        if src < 0:
            src = 0
        elif src > size - 1:
            src = size - 1
        a = <Py_ssize_t>src
        i0[d] = a
        i1[d] = a + 1 if a + 1 < size else size - 1
        frac[d] = src - a


cdef void _up_fwd(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] tmp,
                  floating[:, :, :, ::1] out,
                  const Py_ssize_t[::1] r0, const Py_ssize_t[::1] r1, const double[::1] rf,
                  const Py_ssize_t[::1] c0, const Py_ssize_t[::1] c1, const double[::1] cf) noexcept nogil:
    cdef Py_ssize_t n, c, y, xx
    cdef floating a, b, f
    for n in range(x.shape[0]):
        for c in range(x.shape[1]):
            for y in range(tmp.shape[2]):
                f = <floating>rf[y]
                for xx in range(tmp.shape[3]):
                    a = x[n, c, r0[y], xx]
                    b = x[n, c, r1[y], xx]
                    tmp[n, c, y, xx] = a + f * (b - a)
            for y in range(out.shape[2]):
                for xx in range(out.shape[3]):
                    f = <floating>cf[xx]
                    a = tmp[n, c, y, c0[xx]]
                    b = tmp[n, c, y, c1[xx]]
                    out[n, c, y, xx] = a + f * (b - a)


cdef void _up_bwd(const floating[:, :, :, ::1] g, floating[:, :, :, ::1] gtmp,
                  floating[:, :, :, ::1] dx,
                  const Py_ssize_t[::1] r0, const Py_ssize_t[::1] r1, const double[::1] rf,
                  const Py_ssize_t[::1] c0, const Py_ssize_t[::1] c1, const double[::1] cf) noexcept nogil:
    cdef Py_ssize_t n, c, y, xx
    cdef floating f, one = 1
    for n in range(g.shape[0]):
        for c in range(g.shape[1]):
            # column pass: all i0 contributions, then all i1 contributions
            for xx in range(g.shape[3]):
                f = <floating>cf[xx]
                for y in range(g.shape[2]):
                    gtmp[n, c, y, c0[xx]] += (one - f) * g[n, c, y, xx]
            for xx in range(g.shape[3]):
                f = <floating>cf[xx]
                for y in range(g.shape[2]):
                    gtmp[n, c, y, c1[xx]] += f * g[n, c, y, xx]
            for y in range(g.shape[2]):
                f = <floating>rf[y]
                for xx in range(gtmp.shape[3]):
                    dx[n, c, r0[y], xx] += (one - f) * gtmp[n, c, y, xx]
            for y in range(g.shape[2]):
                f = <floating>rf[y]
                for xx in range(gtmp.shape[3]):
                    dx[n, c, r1[y], xx] += f * gtmp[n, c, y, xx]


def _tables(Py_ssize_t size):
    i0 = np.empty(2 * size, dtype=np.intp)
    i1 = np.empty(2 * size, dtype=np.intp)
    frac = np.empty(2 * size, dtype=np.float64)
    _index(size, i0, i1, frac)
    return i0, i1, frac


def upsample2x(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    r0, r1, rf = _tables(h)
    c0, c1, cf = _tables(w)
    tmp = np.empty((n, c, 2 * h, w), dtype=x.dtype)
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    if x.dtype == np.float32:
        _up_fwd[float](x, tmp, out, r0, r1, rf, c0, c1, cf)
    else:
        _up_fwd[double](x, tmp, out, r0, r1, rf, c0, c1, cf)
    return out


def upsample2x_backward(grad_out):
    grad_out = np.ascontiguousarray(grad_out)
    n, c, h2, w2 = grad_out.shape
    h, w = h2 // 2, w2 // 2
    r0, r1, rf = _tables(h)
    c0, c1, cf = _tables(w)
    gtmp = np.zeros((n, c, h2, w), dtype=grad_out.dtype)
    dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    if grad_out.dtype == np.float32:
        _up_bwd[float](grad_out, gtmp, dx, r0, r1, rf, c0, c1, cf)
    else:
        _up_bwd[double](grad_out, gtmp, dx, r0, r1, rf, c0, c1, cf)
    return dx
