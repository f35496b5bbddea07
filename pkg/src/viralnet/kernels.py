"""Backend selection for the hot kernels.

The compiled Cython module is used when it imports; otherwise the numpy
fallback. Set ``VIRALNET_BACKEND=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VIRALNET_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def use_backend(name):
    """Switch backend at runtime ('cython' or 'python'). Returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


def conv2d_forward(x, w, b, stride):
    return _impl.conv2d_forward(x, w, b, stride)


def conv2d_backward(x, w, dout, stride, need_dx):
    return _impl.conv2d_backward(x, w, dout, stride, need_dx)


def bilinear_forward(img, px, py):
    return _impl.bilinear_forward(img, px, py)


def bilinear_backward(img, px, py, dout, need_dimg):
    return _impl.bilinear_backward(img, px, py, dout, need_dimg)
