"""Backend selection for the hot kernels.

The compiled Cython module is used when importable; the numpy fallback
otherwise. ``DPCREG_BACKEND=python`` forces the fallback.
"""
import os

import numpy as np

from dpcreg import _fallback

if os.environ.get("DPCREG_BACKEND", "").lower() == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from dpcreg import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def use_backend(name):
    """Switch the active backend at runtime ("cython" or "python")."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from dpcreg import _kernels
        _impl, BACKEND = _kernels, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")


def fft_rows(z, inverse=False):
    return _impl.fft_rows(z, inverse)


def fft2(z, inverse=False):
    """Unnormalized 2D DFT over the last two axes of a complex array."""
    z = np.asarray(z, dtype=np.complex128)
    lead = z.shape[:-2]
    h, w = z.shape[-2:]
    out = _impl.fft_rows(z.reshape(-1, w), inverse).reshape(-1, h, w)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(-1, h)
    out = _impl.fft_rows(out, inverse).reshape(-1, w, h).transpose(0, 2, 1)
    return np.ascontiguousarray(out).reshape(lead + (h, w))


def _batched(img, xs, ys):
    b = max(img.shape[0], xs.shape[0])
    img = np.broadcast_to(np.asarray(img, dtype=np.float64), (b,) + img.shape[1:])
    xs = np.broadcast_to(np.asarray(xs, dtype=np.float64), (b,) + xs.shape[1:])
    ys = np.broadcast_to(np.asarray(ys, dtype=np.float64), (b,) + ys.shape[1:])
    return img, xs, ys


def bilinear_gather(img, xs, ys):
    img, xs, ys = _batched(img, xs, ys)
    return _impl.bilinear_gather(img, xs, ys)


def bilinear_scatter(grad, xs, ys, h, w):
    grad = np.asarray(grad, dtype=np.float64)
    xs = np.broadcast_to(np.asarray(xs, dtype=np.float64), grad.shape)
    ys = np.broadcast_to(np.asarray(ys, dtype=np.float64), grad.shape)
    return _impl.bilinear_scatter(grad, xs, ys, h, w)


def bilinear_coord_grad(img, xs, ys, grad):
    img, xs, ys = _batched(img, xs, ys)
    grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), xs.shape)
    return _impl.bilinear_coord_grad(img, xs, ys, grad)
