# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: valid 2-D convolution and bilinear sampling.

Every function here has a numpy twin in :mod:`viralnet._pykernels` with the
same signature; :mod:`viralnet.kernels` picks one at import time.
"""
import numpy as np
from libc.math cimport floor, fabs, rint

DEF SNAP = 1e-9


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H - kh) // stride + 1, Wo = (W - kw) // stride + 1
    out_arr = np.empty((N, O, Ho, Wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, y, xx
    cdef double wv, bv
    cdef double* orow
    cdef const double* irow
    for n in range(N):
        for o in range(O):
            bv = b[o]
            for y in range(Ho):
                orow = &out[n, o, y, 0]
                for xx in range(Wo):
                    orow[xx] = bv
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[o, c, i, j]
                        if stride == 1:
                            for y in range(Ho):
                                orow = &out[n, o, y, 0]
                                irow = &x[n, c, y + i, j]
                                for xx in range(Wo):
                                    orow[xx] += wv * irow[xx]
                        else:
                            for y in range(Ho):
                                orow = &out[n, o, y, 0]
                                irow = &x[n, c, y * stride + i, j]
                                for xx in range(Wo):
                                    orow[xx] += wv * irow[xx * stride]
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] dout, Py_ssize_t stride, bint need_dx):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    dw_arr = np.zeros((O, C, kh, kw))
    db_arr = np.zeros(O)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, :, :, ::1] dx
    if need_dx:
        dx_arr = np.zeros((N, C, H, W))
        dx = dx_arr
    else:
        dx_arr = None
    cdef Py_ssize_t n, o, c, i, j, y, xx
    cdef double acc, wv
    cdef const double* grow
    cdef const double* irow
    cdef double* xrow
    cdef double* lane
    # per-lane partial sums keep the weight-gradient loop vectorizable
    lanes_arr = np.empty(kw * Wo)
    cdef double[::1] lanes = lanes_arr
    for n in range(N):
        for o in range(O):
            acc = 0.0
            for y in range(Ho):
                grow = &dout[n, o, y, 0]
                for xx in range(Wo):
                    acc += grow[xx]
            db[o] += acc
            for c in range(C):
                for i in range(kh):
                    lanes[:] = 0.0
                    for y in range(Ho):
                        grow = &dout[n, o, y, 0]
                        irow = &x[n, c, y * stride + i, 0]
                        for j in range(kw):
                            lane = &lanes[j * Wo]
                            if stride == 1:
                                for xx in range(Wo):
                                    lane[xx] += grow[xx] * irow[j + xx]
                            else:
                                for xx in range(Wo):
                                    lane[xx] += grow[xx] * irow[j + xx * stride]
                        if need_dx:
                            xrow = &dx[n, c, y * stride + i, 0]
                            for j in range(kw):
                                wv = w[o, c, i, j]
                                if stride == 1:
                                    for xx in range(Wo):
                                        xrow[j + xx] += wv * grow[xx]
                                else:
                                    for xx in range(Wo):
                                        xrow[j + xx * stride] += wv * grow[xx]
                    for j in range(kw):
                        acc = 0.0
                        lane = &lanes[j * Wo]
                        for xx in range(Wo):
                            acc += lane[xx]
                        dw[o, c, i, j] += acc
    return dx_arr, dw_arr, db_arr


cdef inline double _snap(double p) nogil:
    cdef double r = rint(p)
    if fabs(p - r) < SNAP:
        return r
    return p


def bilinear_forward(const double[:, :, :, ::1] img, const double[:, :, ::1] px,
                     const double[:, :, ::1] py):
    """Sample ``img`` at pixel coordinates (px, py); outside pixels read as zero."""
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t Ho = px.shape[1], Wo = px.shape[2]
    out_arr = np.zeros((N, C, Ho, Wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, u, v, x0, y0, x1, y1
    cdef double xs, ys, fx, fy, w00, w01, w10, w11, acc
    cdef bint vx0, vx1, vy0, vy1
    for n in range(N):
        for u in range(Ho):
            for v in range(Wo):
                xs = _snap(px[n, u, v])
                ys = _snap(py[n, u, v])
                x0 = <Py_ssize_t>floor(xs)
                y0 = <Py_ssize_t>floor(ys)
                fx = xs - x0
                fy = ys - y0
                x1 = x0 + 1
                y1 = y0 + 1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                w00 = (1.0 - fx) * (1.0 - fy)
                w01 = fx * (1.0 - fy)
                w10 = (1.0 - fx) * fy
                w11 = fx * fy
                for c in range(C):
                    acc = 0.0
                    if vy0:
                        if vx0:
                            acc += w00 * img[n, c, y0, x0]
                        if vx1:
                            acc += w01 * img[n, c, y0, x1]
                    if vy1:
                        if vx0:
                            acc += w10 * img[n, c, y1, x0]
                        if vx1:
                            acc += w11 * img[n, c, y1, x1]
                    out[n, c, u, v] = acc
    return out_arr


def bilinear_backward(const double[:, :, :, ::1] img, const double[:, :, ::1] px,
                      const double[:, :, ::1] py, const double[:, :, :, ::1] dout,
                      bint need_dimg):
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t Ho = px.shape[1], Wo = px.shape[2]
    dpx_arr = np.zeros((N, Ho, Wo))
    dpy_arr = np.zeros((N, Ho, Wo))
    cdef double[:, :, ::1] dpx = dpx_arr
    cdef double[:, :, ::1] dpy = dpy_arr
    cdef double[:, :, :, ::1] dimg
    if need_dimg:
        dimg_arr = np.zeros((N, C, H, W))
        dimg = dimg_arr
    else:
        dimg_arr = None
    cdef Py_ssize_t n, c, u, v, x0, y0, x1, y1
    cdef double xs, ys, fx, fy, g, a00, a01, a10, a11, gx, gy
    cdef bint vx0, vx1, vy0, vy1
    for n in range(N):
        for u in range(Ho):
            for v in range(Wo):
                xs = _snap(px[n, u, v])
                ys = _snap(py[n, u, v])
                x0 = <Py_ssize_t>floor(xs)
                y0 = <Py_ssize_t>floor(ys)
                fx = xs - x0
                fy = ys - y0
                x1 = x0 + 1
                y1 = y0 + 1
                vx0 = 0 <= x0 < W
                vx1 = 0 <= x1 < W
                vy0 = 0 <= y0 < H
                vy1 = 0 <= y1 < H
                gx = 0.0
                gy = 0.0
                for c in range(C):
                    g = dout[n, c, u, v]
                    a00 = img[n, c, y0, x0] if (vy0 and vx0) else 0.0
                    a01 = img[n, c, y0, x1] if (vy0 and vx1) else 0.0
                    a10 = img[n, c, y1, x0] if (vy1 and vx0) else 0.0
                    a11 = img[n, c, y1, x1] if (vy1 and vx1) else 0.0
                    gx += g * ((1.0 - fy) * (a01 - a00) + fy * (a11 - a10))
                    gy += g * ((1.0 - fx) * (a10 - a00) + fx * (a11 - a01))
                    if need_dimg:
                        if vy0 and vx0:
                            dimg[n, c, y0, x0] += g * (1.0 - fx) * (1.0 - fy)
                        if vy0 and vx1:
                            dimg[n, c, y0, x1] += g * fx * (1.0 - fy)
                        if vy1 and vx0:
                            dimg[n, c, y1, x0] += g * (1.0 - fx) * fy
                        if vy1 and vx1:
                            dimg[n, c, y1, x1] += g * fx * fy
                dpx[n, u, v] = gx
                dpy[n, u, v] = gy
    return dimg_arr, dpx_arr, dpy_arr
