"""Spatial transformer pieces: scale/translation affines, grids, sampling.

Coordinates are normalized to [-1, 1] on both axes with (-1, -1) at the
centre of the top-left pixel and (1, 1) at the bottom-right one. An affine
``(s, tx, ty)`` maps an output lattice point (xo, yo) to the source point
(s*xo + tx, s*yo + ty), so the region of interest is the square
[tx - s, tx + s] x [ty - s, ty + s].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numcore import DimensionError, LayerParams, Stack, conv_stack

BOUNDS_EPS = 1e-9


@dataclass(frozen=True)
class AffineParams:
    s: float
    tx: float
    ty: float

    def as_array(self):
        return np.array([self.s, self.tx, self.ty])

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass
class SamplingGrid:
    """Source coordinates, ``x`` and ``y`` each shaped ``(out_h, out_w)``."""
    x: np.ndarray
    y: np.ndarray

    @property
    def out_h(self):
        return self.x.shape[0]

    @property
    def out_w(self):
        return self.x.shape[1]

    @property
    def coords(self):
        return np.stack([self.x, self.y], axis=-1)


@dataclass(frozen=True)
class BoundsReport:
    lam: int
    spatial_loss: float


def lattice(n: int) -> np.ndarray:
    """Uniform normalized lattice of ``n`` points from -1 to 1."""
    c = (n - 1) / 2.0
    return (np.arange(n) - c) / c


def grid_coords(theta, out_h: int, out_w: int):
    """Batched grid: ``theta`` is (N, 3) -> source x, y each (N, out_h, out_w)."""
    if out_h < 2:
        raise DimensionError("affine_grid", "out_h", ">= 2", out_h)
    if out_w < 2:
        raise DimensionError("affine_grid", "out_w", ">= 2", out_w)
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    s, tx, ty = (theta[:, i, None, None] for i in range(3))
    xo = lattice(out_w)[None, None, :]
    yo = lattice(out_h)[None, :, None]
    shape = (theta.shape[0], out_h, out_w)
    x = np.broadcast_to(s * xo + tx, shape).copy()
    y = np.broadcast_to(s * yo + ty, shape).copy()
    return x, y


def affine_grid(params: AffineParams, out_h: int, out_w: int) -> SamplingGrid:
    x, y = grid_coords(params.as_array()[None], out_h, out_w)
    return SamplingGrid(x[0], y[0])


def to_pixels(x, y, height: int, width: int):
    return (x + 1.0) * ((width - 1) / 2.0), (y + 1.0) * ((height - 1) / 2.0)


def sample(images, x, y):
    """Batched bilinear sampling with zero padding. images (N, C, H, W)."""
    H, W = images.shape[2:]
    px, py = to_pixels(x, y, H, W)
    return kernels.bilinear_forward(np.ascontiguousarray(images),
                                    np.ascontiguousarray(px), np.ascontiguousarray(py))


def sample_backward(images, x, y, upstream, need_image_grad=True):
    """Returns (image_grad or None, dL/dx, dL/dy) in normalized units."""
    H, W = images.shape[2:]
    px, py = to_pixels(x, y, H, W)
    dimg, dpx, dpy = kernels.bilinear_backward(
        np.ascontiguousarray(images), np.ascontiguousarray(px), np.ascontiguousarray(py),
        np.ascontiguousarray(upstream), need_image_grad)
    return dimg, dpx * ((W - 1) / 2.0), dpy * ((H - 1) / 2.0)


def grid_backward(dx, dy):
    """Chain grid-coordinate gradients (N, h, w) to (N, 3) affine gradients."""
    out_h, out_w = dx.shape[1:]
    xo = lattice(out_w)[None, None, :]
    yo = lattice(out_h)[None, :, None]
    ds = (dx * xo).sum(axis=(1, 2)) + (dy * yo).sum(axis=(1, 2))
    return np.stack([ds, dx.sum(axis=(1, 2)), dy.sum(axis=(1, 2))], axis=1)


def bilinear_sample(image, grid: SamplingGrid):
    img = np.asarray(image, dtype=np.float64)
    if not (np.all(np.isfinite(grid.x)) and np.all(np.isfinite(grid.y))):
        raise ValueError("grid coordinates must be finite")
    return sample(img[None], grid.x[None], grid.y[None])[0]


def bilinear_sample_backward(image, grid: SamplingGrid, upstream):
    """Gradients w.r.t. the image and each grid coordinate.

    Returns ``(image_grad, grid_grad)`` with ``grid_grad`` shaped
    ``(out_h, out_w, 2)`` holding (d/dx, d/dy).
    """
    img = np.asarray(image, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (img.shape[0], grid.out_h, grid.out_w):
        raise DimensionError("bilinear_sample_backward", "upstream",
                             (img.shape[0], grid.out_h, grid.out_w), up.shape)
    dimg, dx, dy = sample_backward(img[None], grid.x[None], grid.y[None], up[None])
    return dimg[0], np.stack([dx[0], dy[0]], axis=-1)


def affine_backward(params: AffineParams, out_h: int, out_w: int, grid_grad):
    """d/d(s, tx, ty) given d/d(grid coords) shaped (out_h, out_w, 2)."""
    g = np.asarray(grid_grad)
    return grid_backward(g[None, ..., 0], g[None, ..., 1])[0]


def corner_lambda(theta):
    """Out-of-bounds indicator for (N, 3) affines; depends only on the affine."""
    theta = np.atleast_2d(theta)
    s, t = theta[:, :1], theta[:, 1:]
    extreme = np.maximum(np.abs(t + s), np.abs(t - s)).max(axis=1)
    return (extreme > 1.0 + BOUNDS_EPS).astype(np.int64)


def spatial_loss(theta):
    """(C - s t)^2 summed over both axes with the centre C at the origin."""
    theta = np.atleast_2d(theta)
    s = theta[:, 0]
    return s * s * (theta[:, 1] ** 2 + theta[:, 2] ** 2)


def spatial_loss_grad(theta):
    theta = np.atleast_2d(theta)
    s, tx, ty = theta[:, 0], theta[:, 1], theta[:, 2]
    return np.stack([2 * s * (tx * tx + ty * ty), 2 * s * s * tx, 2 * s * s * ty], axis=1)


def bounds_check(params: AffineParams) -> BoundsReport:
    theta = params.as_array()[None]
    return BoundsReport(int(corner_lambda(theta)[0]), float(spatial_loss(theta)[0]))


class LocalizationNet:
    """Two conv(5x5)-relu-avgpool blocks, fc -> hidden -> relu -> fc -> (s, tx, ty).

    The last layer starts with zero weights and bias (init_scale, 0, 0), so a
    fresh net returns exactly that affine for any input.
    """

    def __init__(self, in_ch, in_size, rng, init_scale=1.0, channels=(4, 8), hidden=32,
                 name="loc"):
        self.in_ch, self.in_size, self.init_scale = in_ch, in_size, float(init_scale)
        plan = [(channels[0], 5), (channels[1], 5)]
        self.stack, _ = conv_stack(in_ch, in_size, plan, [hidden], rng, name)
        self.stack.spec.append(("relu",))
        self.head = LayerParams.zeros((3, hidden), name=f"{name}.out")
        self.head.bias[:] = [self.init_scale, 0.0, 0.0]
        self.stack.spec.append(("fc", self.head))

    @property
    def params(self):
        return self.stack.params

    def forward(self, images):
        if images.shape[1:] != (self.in_ch, self.in_size, self.in_size):
            raise DimensionError("localize", "image",
                                 (self.in_ch, self.in_size, self.in_size), images.shape[1:])
        return self.stack.forward(images)

    def backward(self, cache, dtheta):
        self.stack.backward(cache, dtheta, need_input_grad=False)


def localize(net: LocalizationNet, image) -> AffineParams:
    img = np.asarray(image, dtype=np.float64)
    theta, _ = net.forward(img[None])
    return AffineParams.from_array(theta[0])
