import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpcreg import diffcore as dc
from dpcreg import spectral
from dpcreg.gradcheck import check
from oracles import correlation_bruteforce, correlation_loops, dft2_direct


class TestFFT:
    def test_constant_image(self):
        z = spectral.fft2(np.full((8, 8), 0.7)).numpy()
        assert z[0, 0] == pytest.approx(64 * 0.7)
        z[0, 0] = 0
        np.testing.assert_allclose(np.abs(z), 0, atol=1e-12)

    def test_delta_at_origin(self):
        x = np.zeros((8, 8))
        x[0, 0] = 1
        np.testing.assert_allclose(spectral.fft2(x).numpy(), np.ones((8, 8)), atol=1e-12)

    def test_delta_off_origin_matches_direct_sum(self):
        x = np.zeros((4, 4))
        x[1, 0] = 1
        z = spectral.fft2(x).numpy()
        ref = dft2_direct(x)
        np.testing.assert_allclose(z, ref, atol=1e-12)
        np.testing.assert_allclose(np.abs(z), 1.0, atol=1e-12)
        # phase is linear in the row frequency u: -2 pi u / 4
        u = np.arange(4)[:, None] * np.ones((1, 4))
        np.testing.assert_allclose(np.exp(1j * np.angle(z)), np.exp(-2j * np.pi * u / 4), atol=1e-12)

    @pytest.mark.parametrize("shape", [(4, 4), (8, 16), (16, 8)])
    def test_random_matches_direct_sum(self, rng, shape):
        x = rng.normal(size=shape)
        np.testing.assert_allclose(spectral.fft2(x).numpy(), dft2_direct(x), atol=1e-10)

    def test_round_trip(self, rng):
        x = rng.normal(size=(16, 32))
        back = dc.ifft2(spectral.fft2(x)).numpy()
        assert np.max(np.abs(back - x)) < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_parseval(self, seed):
        x = np.random.default_rng(seed).normal(size=(16, 16))
        z = spectral.fft2(x).numpy()
        assert abs(np.sum(x ** 2) - np.sum(np.abs(z) ** 2) / 256) < 1e-9

    def test_rejects_non_power_of_two_with_guidance(self):
        with pytest.raises(ValueError, match="resize"):
            spectral.fft2(np.zeros((12, 16)))


class TestMagnitudeSpectrum:
    @pytest.mark.parametrize("seed", range(50))
    def test_circular_shift_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.choice([8, 16, 32]))
        x = rng.random((n, n))
        dy, dx = rng.integers(-n, n, 2)
        a = spectral.magnitude_spectrum(x).magnitude.data
        b = spectral.magnitude_spectrum(np.roll(x, (dy, dx), axis=(0, 1))).magnitude.data
        assert np.max(np.abs(a - b)) < 1e-6

    def test_point_symmetry(self, rng):
        n = 16
        m = spectral.magnitude_spectrum(rng.random((n, n))).magnitude.data
        # centered layout: index k holds frequency k - n/2; -f sits at n - k (mod n)
        idx = (n - np.arange(n)) % n
        np.testing.assert_allclose(m, m[np.ix_(idx, idx)], atol=1e-6)
        assert np.all(m >= 0)

    def test_dc_at_center(self, rng):
        x = rng.random((8, 8))
        m = spectral.magnitude_spectrum(x).magnitude.data
        assert m[4, 4] == pytest.approx(x.sum())

    def test_rotation_by_90(self, rng):
        x = rng.random((8, 8))
        y = np.rot90(x)
        fx = np.abs(dft2_direct(x))
        fy = np.abs(spectral.fft2(y).numpy())
        # y[i, j] = x[j, n-1-i]  =>  |Fy(u, v)| = |Fx(v, -u)|
        n = 8
        expected = np.array([[fx[v, (-u) % n] for v in range(n)] for u in range(n)])
        np.testing.assert_allclose(fy, expected, atol=1e-10)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        x = np.random.default_rng(seed).normal(size=(8, 8))
        assert check(lambda a: spectral.magnitude_spectrum(a, window=spectral.hann_window(8)).magnitude, [x]) < 1e-4


class TestHighpass:
    def test_dc_is_zero(self):
        g = spectral.highpass_gain((16, 16))
        assert g[8, 8] == 0.0
        assert np.all(g >= 0)

    def test_ones_give_the_gain(self):
        s = spectral.Spectrum(dc.Tensor(np.ones((8, 8))), (8, 8))
        np.testing.assert_array_equal(spectral.highpass_filter(s).magnitude.data, spectral.highpass_gain((8, 8)))

    def test_twice_is_squared_gain(self, rng):
        m = rng.random((16, 16))
        s = spectral.Spectrum(dc.Tensor(m), (16, 16))
        twice = spectral.highpass_filter(spectral.highpass_filter(s)).magnitude.data
        np.testing.assert_array_equal(twice, m * spectral.highpass_gain((16, 16)) * spectral.highpass_gain((16, 16)))

    def test_gain_increases_with_frequency(self):
        g = spectral.highpass_gain((32, 32))
        row = g[16, 16:]
        assert np.all(np.diff(row) > 0)


def _blob_spectrum(n, transform, blobs):
    """Analytic point-symmetric spectrum sampled after a similarity transform."""
    c = n // 2
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    px, py = transform(xx - c, yy - c)
    out = np.zeros((n, n))
    for bx, by, w in blobs:
        for sgn in (1, -1):
            out += np.exp(-((px - sgn * bx) ** 2 + (py - sgn * by) ** 2) / (2 * w ** 2))
    return out


class TestLogPolar:
    def test_constant_spectrum(self):
        s = spectral.Spectrum(dc.Tensor(np.full((32, 32), 2.5)), (32, 32))
        lp = spectral.logpolar_resample(s, 16, 16)
        np.testing.assert_allclose(lp.values.data, 2.5, atol=1e-12)

    def test_axis_mappings_monotone(self):
        lp = spectral.logpolar_resample(spectral.Spectrum(dc.Tensor(np.ones((32, 32))), (32, 32)), 16, 32)
        assert np.all(np.diff(lp.radius(np.arange(16))) > 0)
        assert np.all(np.diff(lp.angle(np.arange(32))) > 0)
        assert lp.radius(0) == pytest.approx(1.0)
        assert lp.radius(15) == pytest.approx(15.0)
        assert lp.angle(32) == pytest.approx(math.pi)

    def test_radius_range_checked(self):
        s = spectral.Spectrum(dc.Tensor(np.ones((16, 16))), (16, 16))
        with pytest.raises(ValueError, match="radius range"):
            spectral.logpolar_resample(s, 8, 8, radius_range=(1.0, 9.0))
        with pytest.raises(ValueError):
            spectral.logpolar_resample(s, 4, 8)

    @staticmethod
    def _column_shift(a, b):
        ca = np.fft.fft(a - a.mean(axis=1, keepdims=True), axis=1)
        cb = np.fft.fft(b - b.mean(axis=1, keepdims=True), axis=1)
        prof = np.real(np.fft.ifft(np.conj(ca) * cb, axis=1)).sum(axis=0)
        k = int(np.argmax(prof))
        return k if k < a.shape[1] // 2 else k - a.shape[1]

    @pytest.mark.parametrize("k", [3, 10, -7, 20])
    def test_rotation_shifts_columns(self, k):
        n, rows, cols = 64, 32, 64
        theta = k * math.pi / cols
        blobs = [(9.0, 3.0, 1.5), (-4.0, 14.0, 2.0), (18.0, -10.0, 2.5)]
        ident = _blob_spectrum(n, lambda x, y: (x, y), blobs)
        # content rotated by +theta: sample the original at R(-theta) p
        ct, st = math.cos(theta), math.sin(theta)
        rot = _blob_spectrum(n, lambda x, y: (ct * x + st * y, -st * x + ct * y), blobs)
        a = spectral.logpolar_resample(spectral.Spectrum(dc.Tensor(ident), (n, n)), rows, cols).values.data
        b = spectral.logpolar_resample(spectral.Spectrum(dc.Tensor(rot), (n, n)), rows, cols).values.data
        assert self._column_shift(a, b) == k

    @pytest.mark.parametrize("k", [2, 5, -4])
    def test_scale_shifts_rows(self, k):
        n, rows, cols = 64, 48, 32
        base = (31.0 / 1.0) ** (1.0 / (rows - 1))
        s = base ** k
        blobs = [(6.0, 2.0, 1.2), (-3.0, 9.0, 1.5), (12.0, -5.0, 2.0)]
        ident = _blob_spectrum(n, lambda x, y: (x, y), blobs)
        scaled = _blob_spectrum(n, lambda x, y: (x / s, y / s), blobs)
        a = spectral.logpolar_resample(spectral.Spectrum(dc.Tensor(ident), (n, n)), rows, cols).values.data
        b = spectral.logpolar_resample(spectral.Spectrum(dc.Tensor(scaled), (n, n)), rows, cols).values.data
        assert self._column_shift(a.T, b.T) == k

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        m = np.random.default_rng(seed).random((16, 16))

        def fn(x):
            return spectral.logpolar_resample(spectral.Spectrum(x, (16, 16)), 8, 8, radius_range=(1.3, 6.7)).values
        assert check(fn, [m]) < 1e-4


class TestCorrelation:
    def test_autocorrelation_peak_at_zero(self, rng):
        a = rng.random((16, 16))
        c = spectral.circular_cross_correlation(a, a).data
        assert np.unravel_index(np.argmax(c), c.shape) == (0, 0)

    def test_shift_recovered_and_full_map_matches(self, rng):
        a = rng.random((32, 32))
        b = np.roll(a, (10, -5), axis=(0, 1))
        c = spectral.circular_cross_correlation(a, b).data
        ref = correlation_bruteforce(a, b)
        assert np.max(np.abs(c - ref)) < 1e-6
        i, j = np.unravel_index(np.argmax(c), c.shape)
        assert (spectral.signed_index(32)[i], spectral.signed_index(32)[j]) == (10, -5)

    @pytest.mark.parametrize("n", [8, 16])
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_bruteforce(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        c = spectral.circular_cross_correlation(a, b).data
        ref = correlation_bruteforce(a, b)
        assert np.max(np.abs(c - ref)) < 1e-9
        assert np.argmax(c) == np.argmax(ref)

    def test_matches_scalar_loops_8x8(self, rng):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        np.testing.assert_allclose(spectral.circular_cross_correlation(a, b).data, correlation_loops(a, b),
                                   atol=1e-9)

    def test_phase_normalized_is_a_delta_for_pure_shift(self, rng):
        a = rng.random((16, 16))
        c = spectral.circular_cross_correlation(a, np.roll(a, (3, 7), axis=(0, 1)), phase_normalized=True).data
        # the magnitude floor slightly attenuates the weakest bins
        assert c[3, 7] == pytest.approx(1.0, abs=1e-2)
        c[3, 7] = 0
        assert np.max(np.abs(c)) < 1e-2

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            spectral.circular_cross_correlation(np.zeros((8, 8)), np.zeros((8, 16)))

    @pytest.mark.parametrize("normalized", [False, True])
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, normalized, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        assert check(lambda x, y: spectral.circular_cross_correlation(x, y, normalized), [a, b]) < 1e-4

    def test_batched_equals_per_item(self, rng):
        a, b = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
        batch = spectral.circular_cross_correlation(a, b).data
        for k in range(3):
            np.testing.assert_allclose(batch[k], spectral.circular_cross_correlation(a[k], b[k]).data, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(dy=st.integers(-8, 7), dx=st.integers(-8, 7), seed=st.integers(0, 10_000))
def test_correlation_argmax_is_the_shift(dy, dx, seed):
    a = np.random.default_rng(seed).random((16, 16))
    c = spectral.circular_cross_correlation(a, np.roll(a, (dy, dx), axis=(0, 1)), phase_normalized=True).data
    i, j = np.unravel_index(np.argmax(c), c.shape)
    assert (spectral.signed_index(16)[i], spectral.signed_index(16)[j]) == (dy, dx)
