"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Signatures and semantics match the compiled module exactly; results agree to
floating-point summation order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SNAP = 1e-9


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, b, stride):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride)
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x, w, dout, stride, need_dx):
    kh, kw = w.shape[2:]
    Ho, Wo = dout.shape[2:]
    win = _windows(x, kh, kw, stride)
    dw = np.einsum("nchwij,nohw->ocij", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + (Ho - 1) * stride + 1:stride, j:j + (Wo - 1) * stride + 1:stride] += \
                    np.einsum("nohw,oc->nchw", dout, w[:, :, i, j])
    return dx, np.ascontiguousarray(dw), db


def _corners(img, px, py):
    N, C, H, W = img.shape
    rx, ry = np.rint(px), np.rint(py)
    xs = np.where(np.abs(px - rx) < SNAP, rx, px)
    ys = np.where(np.abs(py - ry) < SNAP, ry, py)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    n = np.arange(N)[:, None, None]
    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            valid = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
            yc, xc = np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)
            # (N, C, Ho, Wo) neighbour values with zero padding
            vals = img[n, :, yc, xc].transpose(0, 3, 1, 2) * valid[:, None]
            taps.append((vals, valid, yc, xc))
    return fx, fy, taps


def bilinear_forward(img, px, py):
    fx, fy, taps = _corners(img, px, py)
    (a00, *_), (a01, *_), (a10, *_), (a11, *_) = taps
    fx, fy = fx[:, None], fy[:, None]
    out = (1 - fx) * (1 - fy) * a00 + fx * (1 - fy) * a01 + (1 - fx) * fy * a10 + fx * fy * a11
    return np.ascontiguousarray(out)


def bilinear_backward(img, px, py, dout, need_dimg):
    N, C, H, W = img.shape
    fx, fy, taps = _corners(img, px, py)
    a00, a01, a10, a11 = (t[0] for t in taps)
    fxc, fyc = fx[:, None], fy[:, None]
    dpx = (dout * ((1 - fyc) * (a01 - a00) + fyc * (a11 - a10))).sum(axis=1)
    dpy = (dout * ((1 - fxc) * (a10 - a00) + fxc * (a11 - a01))).sum(axis=1)
    dimg = None
    if need_dimg:
        weights = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
        flat = np.zeros(N * C * H * W)
        base = (np.arange(N)[:, None] * C + np.arange(C)[None, :]) * (H * W)  # (N, C)
        for (_, valid, yc, xc), wt in zip(taps, weights):
            idx = base[:, :, None, None] + (yc * W + xc)[:, None]
            contrib = dout * (wt * valid)[:, None]
            flat += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=flat.size)
        dimg = flat.reshape(N, C, H, W)
    return dimg, np.ascontiguousarray(dpx), np.ascontiguousarray(dpy)
