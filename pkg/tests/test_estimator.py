import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from dpcreg import diffcore as dc
from dpcreg import gradcheck
from dpcreg.datasynth import gen_base_image, make_pair
from dpcreg.estimator import (
    CorrelationMap,
    EstimatorConfig,
    PoseSim2,
    RegistrationError,
    correlation_map,
    estimate_rotation_scale,
    estimate_translation,
    hard_argmax_2d,
    register,
    rotation_candidates,
    rotation_disambiguation,
    rotscale_readout,
    rotscale_target_bins,
    sharpness_score,
    soft_argmax_2d,
    soft_pose,
    warp_sim2,
)
from oracles import correlation_bruteforce, warp_reference

DEG = math.pi / 180


@pytest.fixture(scope="module")
def base128():
    return gen_base_image(7, 128)


@pytest.fixture(scope="module")
def base64():
    return gen_base_image(11, 64)


def _disc(n, margin):
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (n / 2 - margin) ** 2


def _ncc(a, b, mask):
    a, b = a[mask] - a[mask].mean(), b[mask] - b[mask].mean()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _angle_diff(a, b, period=math.pi):
    return abs((a - b + period / 2) % period - period / 2)


poses = st.builds(
    PoseSim2,
    s=st.floats(0.5, 2.0),
    theta=st.floats(-10.0, 10.0),
    tx=st.floats(-60.0, 60.0),
    ty=st.floats(-60.0, 60.0),
)


class TestPoseSim2:
    @given(poses)
    @settings(max_examples=60, deadline=None)
    def test_compose_with_inverse_is_identity(self, p):
        assert p.compose(p.inverse()).close_to(PoseSim2(), 1e-9)
        assert p.inverse().compose(p).close_to(PoseSim2(), 1e-9)

    @given(poses, poses)
    @settings(max_examples=60, deadline=None)
    def test_compose_matches_matrix_product(self, a, b):
        c = np.array([31.5, 31.5])
        np.testing.assert_allclose(a.compose(b).matrix(c), a.matrix(c) @ b.matrix(c), atol=1e-9)

    @given(poses)
    @settings(max_examples=40, deadline=None)
    def test_apply_matches_matrix(self, p):
        pts = np.array([[0.0, 0.0], [10.0, -3.0], [63.0, 63.0]])
        c = (31.5, 31.5)
        hom = np.c_[pts, np.ones(3)] @ p.matrix(c).T
        np.testing.assert_allclose(p.apply(pts, c), hom[:, :2], atol=1e-9)

    def test_theta_is_wrapped(self):
        assert PoseSim2(theta=-math.pi / 2).theta == pytest.approx(1.5 * math.pi)
        assert PoseSim2(theta=1.25 * math.pi).theta_half == pytest.approx(0.25 * math.pi)

    @pytest.mark.parametrize("kw", [{"s": 0.0}, {"s": -1.0}, {"tx": math.nan}, {"theta": math.inf}])
    def test_invalid_parameters_rejected(self, kw):
        with pytest.raises(ValueError):
            PoseSim2(**kw)


class TestWarp:
    def test_identity_is_exact(self, base64):
        np.testing.assert_array_equal(warp_sim2(base64, PoseSim2()).data, base64)

    def test_positive_tx_moves_content_right(self, base64):
        out = warp_sim2(base64, PoseSim2(tx=5.0)).data
        np.testing.assert_allclose(out[:, 5:], base64[:, :-5], atol=1e-12)
        assert np.all(out[:, :5] == 0)

    def test_positive_ty_moves_content_down(self, base64):
        out = warp_sim2(base64, PoseSim2(ty=3.0)).data
        np.testing.assert_allclose(out[3:], base64[:-3], atol=1e-12)

    def test_rotation_is_counterclockwise_in_xy(self):
        # a point to the right of centre ends up below it for +90 degrees (y grows downward)
        img = np.zeros((33, 33))
        img[16, 26] = 1.0
        out = warp_sim2(img, PoseSim2(theta=math.pi / 2)).data
        assert np.unravel_index(out.argmax(), out.shape) == (26, 16)

    @pytest.mark.parametrize("pose", [
        PoseSim2(1.1, 0.3, 2.5, -1.25),
        PoseSim2(0.85, 2.9, -4.0, 6.0),
        PoseSim2(1.0, 1.0, 0.0, 0.0),
    ])
    def test_matches_pixel_loop_reference(self, rng, pose):
        img = rng.random((24, 24))
        ref = warp_reference(img, pose.s, pose.theta, pose.tx, pose.ty)
        np.testing.assert_allclose(warp_sim2(img, pose).data, ref, atol=1e-12)

    @pytest.mark.parametrize("pose", [PoseSim2(1.1, 0.4, 3.0, -2.0), PoseSim2(0.9, 2.5, -1.5, 4.0)])
    def test_inverse_warp_round_trip(self, base128, pose):
        # two bilinear passes blur hard shape edges; a mild pre-blur keeps the
        # comparison about geometry rather than interpolation loss
        img = gaussian_filter(base128, 1.0)
        back = warp_sim2(warp_sim2(img, pose), pose.inverse()).data
        err = np.abs(back - img)[_disc(128, 16)]
        assert err.mean() < 0.02
        assert err.max() < 0.1

    def test_batched_poses(self, rng):
        imgs = rng.random((3, 16, 16))
        s, th = np.array([1.0, 1.1, 0.9]), np.array([0.0, 0.5, 2.0])
        tx, ty = np.array([0.0, 1.0, -2.0]), np.array([0.5, 0.0, 3.0])
        out = warp_sim2(imgs, (s, th, tx, ty)).data
        for b in range(3):
            np.testing.assert_allclose(out[b], warp_sim2(imgs[b], PoseSim2(s[b], th[b], tx[b], ty[b])).data)

    def test_gradient_wrt_image_and_pose(self, rng):
        img = rng.random((10, 10))

        def fn(image, s, th, tx, ty):
            return warp_sim2(image, (s, th, tx, ty))

        args = [img, np.array(1.07), np.array(0.31), np.array(0.43), np.array(-0.27)]
        assert gradcheck.check(fn, args) < 1e-5

    def test_non_finite_pose_rejected(self, base64):
        with pytest.raises(ValueError, match="non-finite"):
            warp_sim2(base64, (1.0, math.nan, 0.0, 0.0))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            warp_sim2(np.zeros((8, 16)), PoseSim2())


def _map(values, beta=1.0):
    t = dc.Tensor(np.asarray(values, dtype=np.float64))
    p = dc.softmax_with_temperature(t, beta, axes=(-2, -1))
    return CorrelationMap(t, p, ("y", "x"), beta)


class TestSoftArgmax:
    def test_single_spike_gives_its_signed_offset(self):
        v = np.full((64, 64), -1e3)
        v[10, 64 - 5] = 0.0
        est, _ = soft_argmax_2d(_map(v))
        np.testing.assert_allclose(est.data, [10.0, -5.0], atol=1e-9)
        np.testing.assert_array_equal(hard_argmax_2d(_map(v).p), [10.0, -5.0])

    def test_uniform_map_centres_on_zero_and_is_flat(self):
        m = _map(np.zeros((32, 32)))
        est, _ = soft_argmax_2d(m)
        # signed coordinates run over [-16, 15], so the full-grid mean is -0.5
        np.testing.assert_allclose(est.data, [-0.5, -0.5], atol=1e-12)
        assert sharpness_score(m.p) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_pair_of_peaks(self):
        v = np.full((32, 32), -1e3)
        v[0, 4] = v[0, 32 - 4] = 0.0
        m = _map(v)
        est, _ = soft_argmax_2d(m)
        np.testing.assert_allclose(est.data, [0.0, 0.0], atol=1e-9)
        assert sharpness_score(m.p) < 0.6

    def test_window_ignores_distant_mass(self):
        v = np.full((64, 64), -1e3)
        v[5, 5], v[5, 40] = 0.0, -0.5
        est, _ = soft_argmax_2d(_map(v), window=(8, 8))
        np.testing.assert_allclose(est.data, [5.0, 5.0], atol=1e-9)

    def test_window_wraps_circularly(self):
        v = np.full((32, 32), -1e3)
        v[0, 31], v[0, 0] = 0.0, 0.0
        est, _ = soft_argmax_2d(_map(v), window=(None, 4))
        assert est.data[1] == pytest.approx(-0.5, abs=1e-9)

    @pytest.mark.parametrize("beta", [100.0, 200.0])
    def test_large_beta_agrees_with_hard_argmax(self, beta):
        rng = np.random.default_rng(int(beta))
        for i in range(500):
            n = (16, 32)[i % 2]
            v = rng.uniform(0.0, 0.9, (n, n))
            v[tuple(rng.integers(0, n, 2))] = 1.0
            m = _map(v, beta)
            est, _ = soft_argmax_2d(m)
            assert np.max(np.abs(est.data - hard_argmax_2d(m.p))) < 0.5

    def test_gradient(self, rng):
        def fn(v):
            cmap = correlation_map(v, dc.Tensor(np.roll(v_fixed, (2, -3), (0, 1))), 10.0, False, ("y", "x"))
            return soft_argmax_2d(cmap, (None, 3))[0]

        v_fixed = rng.random((16, 16))
        assert gradcheck.check(fn, [rng.random((16, 16))]) < 1e-5


class TestTranslation:
    def test_identical_inputs_give_zero(self, base128):
        t, cmap = estimate_translation(base128, base128)
        np.testing.assert_allclose(t, [0.0, 0.0], atol=0.1)
        assert cmap.sharpness > 0.9

    @pytest.mark.parametrize("shift", [(10, -5), (-30, 17), (0, 63), (-64, 1)])
    def test_circular_shift(self, base128, shift):
        tx, ty = shift
        t, _ = estimate_translation(base128, np.roll(base128, (ty, tx), (0, 1)))
        np.testing.assert_allclose(t, [tx, ty], atol=0.5)

    @pytest.mark.parametrize("pose", [PoseSim2(tx=20.0), PoseSim2(tx=-7.5, ty=12.25)])
    def test_non_circular_shift(self, base128, pose):
        t, _ = estimate_translation(base128, warp_sim2(base128, pose).data)
        np.testing.assert_allclose(t, [pose.tx, pose.ty], atol=1.0)

    @pytest.mark.parametrize("seed", range(6))
    def test_hard_readout_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((16, 16))
        b = np.roll(a, tuple(rng.integers(-8, 8, 2)), (0, 1)) + 0.1 * rng.random((16, 16))
        _, cmap = estimate_translation(a, b, EstimatorConfig(trans_phase_norm=False, readout="hard"))
        ref = correlation_bruteforce(a, b)
        ty, tx = np.unravel_index(ref.argmax(), ref.shape)
        wrap = lambda v: (v + 8) % 16 - 8  # noqa: E731
        np.testing.assert_array_equal(cmap.hard, [wrap(ty), wrap(tx)])

    def test_blank_input_raises(self, base64):
        with pytest.raises(RegistrationError, match="no signal"):
            estimate_translation(base64, np.zeros_like(base64))

    def test_shape_mismatch_raises(self, base64):
        with pytest.raises(ValueError):
            estimate_translation(base64, base64[:32, :32])


def _exhaustive_rotation(template, source, step_deg=0.25):
    """Rotate the template through [0, 180) and keep the best-correlated angle."""
    mask = _disc(template.shape[0], 12)
    angles = np.arange(0.0, 180.0, step_deg)
    scores = [_ncc(warp_sim2(template, PoseSim2(theta=a * DEG)).data, source, mask) for a in angles]
    return angles[int(np.argmax(scores))] * DEG


def _exhaustive_scale(template, source, step=0.0025):
    mask = _disc(template.shape[0], 24)
    scales = np.arange(0.8, 1.2 + step / 2, step)
    scores = [_ncc(warp_sim2(template, PoseSim2(s=s)).data, source, mask) for s in scales]
    return scales[int(np.argmax(scores))]


class TestRotationScale:
    def test_identity(self, base128):
        theta, scale, cmap = estimate_rotation_scale(base128, base128)
        assert _angle_diff(theta, 0.0) < 0.1 * DEG
        assert scale == pytest.approx(1.0, abs=0.005)
        assert cmap.axes == ("log-scale", "angle")

    def test_rotation_matches_exhaustive_search(self, base128):
        source = warp_sim2(base128, PoseSim2(theta=30 * DEG)).data
        oracle = _exhaustive_rotation(base128, source)
        assert _angle_diff(oracle, 30 * DEG) <= 0.25 * DEG
        theta, scale, cmap = estimate_rotation_scale(base128, source)
        step = math.pi / cmap.p.shape[-1]
        assert _angle_diff(theta, oracle) <= step
        assert scale == pytest.approx(1.0, abs=0.01)

    def test_scale_matches_exhaustive_search(self, base128):
        source = warp_sim2(base128, PoseSim2(s=1.1)).data
        oracle = _exhaustive_scale(base128, source)
        assert oracle == pytest.approx(1.1, abs=0.005)
        theta, scale, cmap = estimate_rotation_scale(base128, source)
        assert abs(math.log(scale / oracle)) <= math.log(cmap.base)
        assert _angle_diff(theta, 0.0) < 1 * DEG

    @pytest.mark.parametrize("theta,scale", [(100 * DEG, 0.85), (5 * DEG, 1.15), (170 * DEG, 1.0)])
    def test_combined(self, base128, theta, scale):
        source = warp_sim2(base128, PoseSim2(scale, theta)).data
        th, s, _ = estimate_rotation_scale(base128, source)
        assert _angle_diff(th, theta) < 1 * DEG
        assert s == pytest.approx(scale, rel=0.01)

    def test_invariant_to_translation(self, base128):
        # the magnitude spectrum ignores a circular shift of the source
        source = warp_sim2(base128, PoseSim2(1.05, 40 * DEG)).data
        th0, s0, m0 = estimate_rotation_scale(base128, source)
        th1, s1, _ = estimate_rotation_scale(base128, np.roll(source, (9, -13), (0, 1)))
        step = math.pi / m0.p.shape[-1]
        assert _angle_diff(th0, th1) < step
        assert abs(math.log(s0 / s1)) < math.log(m0.base)

    def test_readout_round_trip(self):
        bins = rotscale_target_bins(np.array([0.3, 2.0]), np.array([0.9, 1.1]), 1.05, 256)
        th, s = rotscale_readout(bins, 1.05, 256)
        np.testing.assert_allclose(th, [0.3, 2.0])
        np.testing.assert_allclose(s, [0.9, 1.1])

    def test_stages_are_recorded(self, base64):
        stages = {}
        estimate_rotation_scale(base64, base64, stages=stages)
        assert {"spectrum_template", "logpolar_source"} <= set(stages)

    def test_blank_input_raises(self, base64):
        with pytest.raises(RegistrationError, match="no signal"):
            estimate_rotation_scale(np.zeros_like(base64), base64)


class TestRegister:
    def test_identical_images_give_identity(self, base128):
        est = register(base128, base128)
        assert est.pose.close_to(PoseSim2(), 0.1) or (
            abs(est.pose.tx) < 0.1 and abs(est.pose.ty) < 0.1
            and _angle_diff(est.pose.theta, 0.0) < 0.1 * DEG and abs(est.pose.s - 1) < 0.005)
        assert not est.ambiguous

    @pytest.mark.parametrize("seed", [3, 17, 29])
    def test_homogeneous_pairs(self, seed):
        pair = make_pair(seed, "homogeneous")
        est = register(pair.template, pair.source)
        assert abs(est.pose.tx - pair.pose.tx) < 2
        assert abs(est.pose.ty - pair.pose.ty) < 2
        assert _angle_diff(est.pose.theta, pair.pose.theta) < 1 * DEG
        assert abs(est.pose.s - pair.pose.s) < 0.05

    def test_rotation_near_wrap_uses_negative_candidate(self, base128):
        pose = PoseSim2(1.0, -2 * DEG, 6.0, -4.0)
        est = register(base128, warp_sim2(base128, pose).data)
        assert _angle_diff(est.pose.theta, pose.theta) < 1 * DEG
        np.testing.assert_allclose([est.pose.tx, est.pose.ty], [6.0, -4.0], atol=1.0)

    def test_rotation_candidates(self):
        cfg = EstimatorConfig()
        assert rotation_candidates(0.5, cfg) == [0.5]
        assert rotation_candidates(math.pi - 0.05, cfg) == pytest.approx([math.pi - 0.05, -0.05])
        assert rotation_candidates(0.5, EstimatorConfig(full_circle=True)) == pytest.approx([0.5, 0.5 + math.pi])

    def test_readouts_are_reported(self, base64):
        est = register(base64, base64)
        assert set(est.soft) == set(est.hard) == {"theta", "scale", "t_residual"}
        assert set(est.sharpness) == {"rotscale", "translation"}

    def test_stage_failure_is_named(self, base64):
        with pytest.raises(RegistrationError, match="rotation-scale stage failed"):
            register(base64, np.zeros_like(base64))

    def test_rejects_non_square(self):
        with pytest.raises(ValueError):
            register(np.ones((8, 16)), np.ones((8, 16)))


class TestDisambiguation:
    @pytest.mark.parametrize("true_deg", [135.0, 315.0])
    def test_full_circle_picks_the_right_half(self, base128, true_deg):
        cfg = EstimatorConfig(full_circle=True)
        source = warp_sim2(base128, PoseSim2(theta=true_deg * DEG)).data
        theta, scale, _ = estimate_rotation_scale(base128, source, cfg)
        assert _angle_diff(theta, 135 * DEG) < 1 * DEG
        picked = rotation_disambiguation(base128, source, theta, scale, cfg)
        assert _angle_diff(picked, true_deg * DEG, 2 * math.pi) < 1 * DEG
        est = register(base128, source, config=cfg)
        assert _angle_diff(est.pose.theta, true_deg * DEG, 2 * math.pi) < 1 * DEG

    def test_half_range_returns_input(self, base64):
        assert rotation_disambiguation(base64, base64, 0.7, 1.0) == 0.7

    def test_fourfold_symmetric_image_is_ambiguous(self, base128):
        sym = sum(np.rot90(base128, k) for k in range(4)) / 4
        est = register(sym, warp_sim2(sym, PoseSim2(theta=20 * DEG)).data)
        assert est.ambiguous
        assert est.sharpness["rotscale"] < 0.6


class TestSoftPose:
    def test_matches_hard_pipeline_on_easy_pair(self, base128):
        pose = PoseSim2(1.05, 25 * DEG, 4.0, -3.0)
        out = soft_pose(base128, warp_sim2(base128, pose).data)
        assert _angle_diff(float(out["theta"].data), pose.theta) < 1 * DEG
        assert math.exp(float(out["log_scale"].data)) == pytest.approx(1.05, abs=0.02)
        np.testing.assert_allclose([out["tx"].data, out["ty"].data], [4.0, -3.0], atol=1.0)

    def test_gradient_through_both_stages(self):
        rng = np.random.default_rng(5)
        base = rng.random((16, 16))
        src = warp_sim2(base, PoseSim2(1.0, 0.2, 1.0, 0.5)).data + 0.05 * rng.random((16, 16))
        w = rng.normal(size=4)

        def fn(t, s):
            out = soft_pose(t, s, config=EstimatorConfig(logpolar_rows=8, logpolar_cols=16,
                                                         beta_rotscale=5.0, beta_trans=5.0))
            vals = [out[k] for k in ("theta", "log_scale", "tx", "ty")]
            return dc.stack([dc.scale(v, float(wi)) for v, wi in zip(vals, w)])

        assert gradcheck.check(fn, [base, src]) < 1e-3
