"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used when
the extension is not built or when ``DPCREG_BACKEND=python`` is set.
"""
import numpy as np

_BITREV = {}
_TWIDDLES = {}


def _bitrev(n):
    perm = _BITREV.get(n)
    if perm is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        perm = np.zeros(n, dtype=np.intp)
        for b in range(bits):
            perm |= ((idx >> b) & 1) << (bits - 1 - b)
        _BITREV[n] = perm
    return perm


def _twiddles(m, inverse):
    key = (m, inverse)
    tw = _TWIDDLES.get(key)
    if tw is None:
        sign = 1.0 if inverse else -1.0
        tw = np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)
        _TWIDDLES[key] = tw
    return tw


def fft_rows(z, inverse=False):
    """Unnormalized radix-2 DFT along the last axis of a 2D complex array.

    Returns a new array; ``inverse`` flips the twiddle sign without the 1/N.
    """
    z = np.asarray(z, dtype=np.complex128)
    rows, n = z.shape
    if n & (n - 1):
        raise ValueError(f"length {n} is not a power of two")
    out = z[:, _bitrev(n)]
    m = 2
    while m <= n:
        half = m // 2
        blocks = out.reshape(rows, n // m, m)
        even = blocks[:, :, :half]
        odd = blocks[:, :, half:] * _twiddles(m, inverse)
        out = np.concatenate((even + odd, even - odd), axis=2).reshape(rows, n)
        m *= 2
    return out


def _corners(xs, ys, h, w):
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    out = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            flat = np.where(ok, yi * w + xi, 0)
            out.append((flat, ok, wx * wy, dx, dy))
    return out, fx, fy


def bilinear_gather(img, xs, ys):
    """Sample ``img[b]`` (B, H, W) at points (B, P); outside pixels read as 0."""
    b, h, w = img.shape
    flat_img = img.reshape(b, h * w)
    out = np.zeros(xs.shape, dtype=np.float64)
    corners, _, _ = _corners(xs, ys, h, w)
    for flat, ok, weight, _, _ in corners:
        vals = np.take_along_axis(flat_img, flat, axis=1)
        out += np.where(ok, vals, 0.0) * weight
    return out


def bilinear_scatter(grad, xs, ys, h, w):
    """Adjoint of :func:`bilinear_gather` with respect to the image."""
    b = grad.shape[0]
    out = np.zeros((b, h * w), dtype=np.float64)
    offsets = (np.arange(b) * (h * w))[:, None]
    corners, _, _ = _corners(xs, ys, h, w)
    flat_out = out.reshape(-1)
    for flat, ok, weight, _, _ in corners:
        contrib = np.where(ok, grad * weight, 0.0)
        flat_out += np.bincount((flat + offsets).ravel(), weights=contrib.ravel(), minlength=b * h * w)
    return out.reshape(b, h, w)


def bilinear_coord_grad(img, xs, ys, grad):
    """Gradient of ``sum(grad * gather(img, xs, ys))`` w.r.t. xs and ys."""
    b, h, w = img.shape
    flat_img = img.reshape(b, h * w)
    corners, fx, fy = _corners(xs, ys, h, w)
    v = []
    for flat, ok, _, _, _ in corners:
        v.append(np.where(ok, np.take_along_axis(flat_img, flat, axis=1), 0.0))
    v00, v01, v10, v11 = v
    dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    return grad * dx, grad * dy
