"""Differentiable spectral front-end: magnitude spectra, filtering, log-polar
resampling and FFT-based circular cross-correlation.

All functions accept a single image (H, W) or a batch (B, H, W) and operate on
the last two axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dpcreg import diffcore as dc
from dpcreg.diffcore import ComplexTensor, Tensor


@dataclass
class Spectrum:
    """Zero-frequency-centered magnitude spectrum.

    The DC bin sits at index ``(H // 2, W // 2)``.
    """

    magnitude: Tensor
    source_shape: tuple


@dataclass
class LogPolarMap:
    """Spectrum resampled on (log radius, angle) axes.

    Row ``i`` samples radius ``origin * base**i``; column ``j`` samples angle
    ``j * coverage / A``.
    """

    values: Tensor
    base: float
    origin: float
    coverage: float = math.pi

    @property
    def angle_step(self):
        return self.coverage / self.values.shape[-1]

    def radius(self, i):
        return self.origin * self.base ** np.asarray(i, dtype=np.float64)

    def angle(self, j):
        return np.asarray(j, dtype=np.float64) * self.angle_step


def fft2(x) -> ComplexTensor:
    """Exact 2D DFT over the last two axes (power-of-two extents)."""
    return dc.fft2(x)


def hann_window(n):
    """Separable periodic raised-cosine window of shape (n, n)."""
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    return np.outer(w, w)


def magnitude_spectrum(x, window=None) -> Spectrum:
    """|fft2(x)| with the zero frequency rolled to the center.

    Parameters
    ----------
    x : Tensor
        Real image or batch of images.
    window : ndarray, optional
        Multiplied into ``x`` before the transform.
    """
    x = dc._wrap(x)
    if window is not None:
        x = dc.mul_const(x, window)
    h, w = x.shape[-2:]
    mag = dc.magnitude(dc.fft2(x))
    centered = dc.roll(mag, (h // 2, w // 2), (-2, -1))
    return Spectrum(centered, (h, w))


def centered_frequencies(n):
    """Frequencies in cycles/sample matching the centered layout."""
    return (np.arange(n) - n // 2) / n


def highpass_gain(shape):
    """Classical (1 - X)(2 - X) ramp with X = cos(pi u) cos(pi v); zero at DC."""
    h, w = shape
    xx = np.outer(np.cos(np.pi * centered_frequencies(h)), np.cos(np.pi * centered_frequencies(w)))
    return (1.0 - xx) * (2.0 - xx)


def highpass_filter(s: Spectrum, gain=None) -> Spectrum:
    """Pointwise multiply by a high-pass gain map (default :func:`highpass_gain`)."""
    if gain is None:
        gain = highpass_gain(s.magnitude.shape[-2:])
    return Spectrum(dc.mul_const(s.magnitude, gain), s.source_shape)


def logpolar_grid(shape, rows, cols, radius_range=None, coverage=math.pi):
    """Sample coordinates (xs, ys) of shape (rows, cols) plus the log base.

    The default radius range is [1, min(H, W)/2 - 1] so that every bilinear
    neighbour stays inside the spectrum.
    """
    h, w = shape
    if rows < 8 or cols < 8:
        raise ValueError(f"log-polar map needs at least 8x8 bins, got {rows}x{cols}")
    limit = min(h, w) / 2 - 1
    rmin, rmax = radius_range if radius_range is not None else (1.0, limit)
    if not 0 < rmin < rmax or rmax > limit:
        raise ValueError(
            f"radius range ({rmin}, {rmax}) must satisfy 0 < rmin < rmax <= {limit} for a {h}x{w} spectrum")
    base = (rmax / rmin) ** (1.0 / (rows - 1))
    radius = rmin * base ** np.arange(rows)
    angle = np.arange(cols) * coverage / cols
    xs = w // 2 + radius[:, None] * np.cos(angle)[None, :]
    ys = h // 2 + radius[:, None] * np.sin(angle)[None, :]
    return xs, ys, base, rmin


def logpolar_resample(s: Spectrum, rows, cols, radius_range=None, coverage=math.pi) -> LogPolarMap:
    """Bilinearly resample a centered spectrum onto log-polar axes."""
    xs, ys, base, rmin = logpolar_grid(s.magnitude.shape[-2:], rows, cols, radius_range, coverage)
    values = dc.bilinear_sample(s.magnitude, xs, ys)
    return LogPolarMap(values, base, rmin, coverage)


def circular_cross_correlation(a, b, phase_normalized=False, eps=1e-6):
    """c(t) = sum_x a(x) b(x + t) over every circular shift t.

    If ``b`` is ``a`` circularly shifted by ``t``, the peak is at ``t``
    (indices wrap, so negative shifts appear at the far end). With
    ``phase_normalized`` the cross-power spectrum is divided by its magnitude
    plus ``eps`` times its largest magnitude.
    """
    a, b = dc._wrap(a), dc._wrap(b)
    if a.shape != b.shape:
        raise ValueError(f"correlation inputs differ in shape: {a.shape} vs {b.shape}")
    cross = dc.cmul(dc.conj(dc.fft2(a)), dc.fft2(b))
    if phase_normalized:
        mag = dc.magnitude(cross)
        # the floor follows the largest magnitude, so it stays in the graph
        floor = dc.scale(dc.amax(mag, axis=(-2, -1), keepdims=True), eps)
        denom = dc.add(mag, dc.broadcast_to(floor, mag.shape))
        inv = dc.div(Tensor(np.ones(mag.shape, dtype=mag.dtype)), denom)
        cross = dc.cscale(cross, inv)
    return dc.ifft2(cross).real


def signed_index(n):
    """Shift values for circular indices 0..n-1, mapped to [-n/2, n/2)."""
    i = np.arange(n)
    return np.where(i >= n // 2, i - n, i)
