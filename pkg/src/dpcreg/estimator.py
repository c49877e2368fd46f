"""Decoupled rotation-scale / translation pose estimator with soft-argmax
readouts, plus the differentiable similarity warp.

Pose convention: a pose maps template points to source points,
``p_src = s * R(theta) @ (p - c) + c + t`` with ``c`` the image center and
``R`` the counter-clockwise rotation in (x=column, y=row) axes. Warping an
image by a pose moves its content accordingly, so ``t = (5, 0)`` moves
content five pixels towards larger column indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dpcreg import diffcore as dc
from dpcreg import spectral
from dpcreg.diffcore import Tensor

TWO_PI = 2.0 * math.pi


class RegistrationError(RuntimeError):
    """Raised when a registration stage cannot produce an estimate."""


@dataclass(frozen=True)
class PoseSim2:
    """Similarity transform: scale ``s``, rotation ``theta`` (radians), translation (tx, ty) in pixels.

    ``theta`` is stored modulo 2*pi so that composition and inversion stay
    exact; :attr:`theta_half` gives the [0, pi) reading used for reporting.
    """

    s: float = 1.0
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        vals = (self.s, self.theta, self.tx, self.ty)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"pose parameters must be finite, got {vals}")
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)

    @property
    def theta_half(self):
        return self.theta % math.pi

    @property
    def t(self):
        return np.array([self.tx, self.ty])

    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def matrix(self, center):
        """3x3 homogeneous matrix acting on (x, y, 1)."""
        a = self.s * self.rotation()
        c = np.asarray(center, dtype=np.float64)
        m = np.eye(3)
        m[:2, :2] = a
        m[:2, 2] = c + self.t - a @ c
        return m

    def apply(self, points, center):
        """Map (N, 2) template points (x, y) to source coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        c = np.asarray(center, dtype=np.float64)
        return (pts - c) @ (self.s * self.rotation()).T + c + self.t

    def inverse(self):
        r_inv = self.rotation().T
        t = -(r_inv @ self.t) / self.s
        return PoseSim2(1.0 / self.s, -self.theta, t[0], t[1])

    def compose(self, other):
        """Pose equal to applying ``other`` first, then ``self``."""
        t = self.s * self.rotation() @ other.t + self.t
        return PoseSim2(self.s * other.s, self.theta + other.theta, t[0], t[1])

    def close_to(self, other, tol=1e-9):
        dth = (self.theta - other.theta + math.pi) % TWO_PI - math.pi
        return (abs(self.s - other.s) <= tol and abs(dth) <= tol
                and abs(self.tx - other.tx) <= tol and abs(self.ty - other.ty) <= tol)


@dataclass
class EstimatorConfig:
    """Tunable settings of the estimator.

    ``logpolar_rows`` / ``logpolar_cols`` default to ``n`` and ``2 n`` for an
    ``n x n`` input.
    """

    beta_trans: float = 30.0
    beta_rotscale: float = 15.0
    window: bool = True
    highpass: bool = True
    rotscale_phase_norm: bool = True
    trans_phase_norm: bool = True
    logpolar_rows: int | None = None
    logpolar_cols: int | None = None
    soft_window: int = 8
    full_circle: bool = False
    wrap_margin_deg: float = 10.0
    readout: str = "refined"
    ambiguity_threshold: float = 0.6

    def grid(self, n):
        return (self.logpolar_rows or n, self.logpolar_cols or 2 * n)


@dataclass
class CorrelationMap:
    """Raw correlation, its probability grid and the derived readouts.

    ``soft`` holds differentiable expectations in bins (row, col);
    ``refined`` the windowed expectation around the hard argmax;
    ``hard`` the argmax, both as signed bin offsets.
    """

    raw: Tensor
    p: Tensor
    axes: tuple
    beta: float
    soft: Tensor = None
    refined: np.ndarray = None
    hard: np.ndarray = None
    sharpness: np.ndarray = None


@dataclass
class PoseEstimate:
    """Registration result with per-stage maps and readouts."""

    pose: PoseSim2
    rotscale: CorrelationMap
    translation: CorrelationMap
    soft: dict
    hard: dict
    sharpness: dict
    ambiguous: bool = False
    stages: dict = field(default_factory=dict)


# -- warp -------------------------------------------------------------------

def _param(v, batch):
    t = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    if batch is None:
        return dc.reshape(t, ())
    return dc.reshape(t, (batch, 1, 1))


def sim2_sampling_grid(n, s, theta, tx, ty, batch=None, dtype=np.float64):
    """Source-sampling coordinates (xs, ys) of the warp, differentiable in the pose.

    Pose parameters are scalars or Tensors; with ``batch`` they have shape (B,).
    """
    c = (n - 1) / 2.0
    yy, xx = np.mgrid[0:n, 0:n].astype(dtype)
    shape = (n, n) if batch is None else (batch, n, n)

    def full(v):
        return dc.broadcast_to(_param(v, batch), shape)

    gx = Tensor(np.broadcast_to(xx - c, shape))
    gy = Tensor(np.broadcast_to(yy - c, shape))
    th = full(theta)
    inv_s = dc.div(Tensor(np.ones(shape, dtype=dtype)), full(s))
    px = dc.sub(gx, full(tx))
    py = dc.sub(gy, full(ty))
    ct, st = dc.cos(th), dc.sin(th)
    qx = dc.shift(dc.mul(dc.add(dc.mul(ct, px), dc.mul(st, py)), inv_s), c)
    qy = dc.shift(dc.mul(dc.sub(dc.mul(ct, py), dc.mul(st, px)), inv_s), c)
    return qx, qy


def warp_sim2(image, pose, dtype=None):
    """Warp ``image`` by ``pose``; out-of-bounds samples read 0.

    ``pose`` is a :class:`PoseSim2` or a tuple (s, theta, tx, ty) of scalars
    or Tensors, each of shape (B,) for a batched (B, H, W) image. The result
    is differentiable w.r.t. the image and Tensor-valued pose parameters.
    """
    image = dc._wrap(image)
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"warp_sim2 needs square images, got {image.shape}")
    if isinstance(pose, PoseSim2):
        params = (pose.s, pose.theta, pose.tx, pose.ty)
    else:
        params = tuple(pose)
    for v in params:
        arr = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.all(np.isfinite(arr)):
            raise ValueError("warp_sim2: non-finite pose")
    n = image.shape[-1]
    batch = image.shape[0] if image.ndim == 3 and np.ndim(_data(params[0])) == 1 else None
    xs, ys = sim2_sampling_grid(n, *params, batch=batch, dtype=dtype or image.dtype)
    return dc.bilinear_sample(image, xs, ys)


def _data(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v)


# -- correlation maps and soft-argmax -----------------------------------------

def normalize_map(c):
    """Zero mean and unit maximum per map (last two axes)."""
    shape = c.shape
    ax = (-2, -1)
    mu = dc.broadcast_to(dc.mean(c, axis=ax, keepdims=True), shape)
    centered = dc.sub(c, mu)
    peak = dc.amax(centered, axis=ax, keepdims=True)
    peak = dc.add(peak, Tensor(np.full(peak.shape, 1e-12, dtype=c.dtype)))
    return dc.div(centered, dc.broadcast_to(peak, shape))


def sharpness_score(p):
    """(max p - mean p) / (1 - mean p): 1 for a single spike, 0 for a uniform map."""
    p = _data(p)
    mx = p.max(axis=(-2, -1))
    mu = 1.0 / (p.shape[-1] * p.shape[-2])
    return (mx - mu) / (1.0 - mu)


def _wrap_signed(v, n):
    return (v + n / 2.0) % n - n / 2.0


def _axis_expectation(marginal, window):
    """Expected signed bin of a circular 1D marginal (..., n)."""
    n = marginal.shape[-1]
    if window is None or 2 * window + 1 >= n:
        coords = spectral.signed_index(n).astype(marginal.dtype)
        return dc.sum(dc.mul_const(marginal, coords), axis=-1)
    lead = marginal.shape[:-1]
    j = marginal.data.argmax(axis=-1)
    offs = np.arange(-window, window + 1)
    idx = (j[..., None] + offs) % n
    index = tuple(np.indices(lead + (len(offs),))[:-1]) + (idx,)
    pw = dc.gather(marginal, index)
    num = dc.sum(dc.mul_const(pw, offs.astype(marginal.dtype)), axis=-1)
    den = dc.sum(pw, axis=-1)
    frac = dc.div(num, den)
    # the hard bin enters as a constant offset; wrapping keeps it signed
    base = _wrap_signed(j.astype(np.float64), n)
    return dc.add(frac, Tensor(np.asarray(base, dtype=marginal.dtype)))


def soft_argmax_2d(cmap: CorrelationMap, window=(None, None)):
    """Expectation of signed (row, col) bin offsets under ``cmap.p``.

    Each axis uses its marginal; ``window[k]`` restricts axis ``k`` to +-W
    bins around the marginal's argmax, with circular indexing.

    Returns
    -------
    expectation : Tensor
        Shape (..., 2), differentiable w.r.t. ``cmap.p``.
    p : Tensor
        The probability grid used.
    """
    p = cmap.p
    rows = _axis_expectation(dc.sum(p, axis=-1), window[0])
    cols = _axis_expectation(dc.sum(p, axis=-2), window[1])
    return dc.stack([rows, cols], axis=-1), p


def hard_argmax_2d(p):
    """Signed (row, col) of the maximum of each map."""
    p = _data(p)
    h, w = p.shape[-2:]
    flat = p.reshape(p.shape[:-2] + (-1,)).argmax(axis=-1)
    r, c = np.divmod(flat, w)
    return np.stack([spectral.signed_index(h)[r], spectral.signed_index(w)[c]], axis=-1).astype(np.float64)


def correlation_map(a, b, beta, phase_normalized, axes):
    """Correlate, normalize and soft-max two equally shaped maps."""
    raw = spectral.circular_cross_correlation(a, b, phase_normalized=phase_normalized)
    p = dc.softmax_with_temperature(normalize_map(raw), beta, axes=(-2, -1))
    return CorrelationMap(raw, p, axes, beta)


def _finish_map(cmap, soft_window, circular_cols_only):
    win_soft = (None, soft_window) if circular_cols_only else (None, None)
    cmap.soft, _ = soft_argmax_2d(cmap, win_soft)
    with dc.no_grad():
        refined, _ = soft_argmax_2d(cmap, (soft_window, soft_window))
    cmap.refined = refined.data.astype(np.float64)
    cmap.hard = hard_argmax_2d(cmap.p)
    cmap.sharpness = sharpness_score(cmap.p)
    return cmap


# -- rotation / scale ---------------------------------------------------------

def _check_signal(x, what):
    d = _data(x)
    if not np.all(np.isfinite(d)):
        raise RegistrationError(f"{what}: non-finite values")
    if np.max(np.abs(d), initial=0.0) <= 1e-12:
        raise RegistrationError(f"{what}: no signal")


def logpolar_features(f, config: EstimatorConfig):
    """Magnitude spectrum -> optional high-pass -> log-polar map."""
    n = f.shape[-1]
    rows, cols = config.grid(n)
    win = spectral.hann_window(n) if config.window else None
    spec = spectral.magnitude_spectrum(f, window=win)
    if config.highpass:
        spec = spectral.highpass_filter(spec)
    return spec, spectral.logpolar_resample(spec, rows, cols)


def rotscale_readout(bins, base, cols):
    """Convert (row, col) bin offsets into (theta in [0, pi), scale)."""
    bins = np.asarray(bins, dtype=np.float64)
    theta = (bins[..., 1] * math.pi / cols) % math.pi
    scale = base ** (-bins[..., 0])
    return theta, scale


def rotscale_target_bins(theta, scale, base, cols):
    """Inverse of :func:`rotscale_readout`: the (row, col) peak of a pose."""
    theta = np.asarray(theta, dtype=np.float64)
    row = -np.log(np.asarray(scale, dtype=np.float64)) / math.log(base)
    col = (theta % math.pi) * cols / math.pi
    return np.stack([row, col], axis=-1)


def estimate_rotation_scale(f_t, f_s, config: EstimatorConfig = None, stages=None):
    """Rotation and scale between two feature maps (or raw images).

    Returns
    -------
    theta, scale : float or ndarray
        Rotation in [0, pi) and scale, from the configured readout.
    cmap : CorrelationMap
        Over axes (log-scale, angle); ``cmap.base`` holds the log base.
    """
    config = config or EstimatorConfig()
    f_t, f_s = dc._wrap(f_t), dc._wrap(f_s)
    if f_t.shape != f_s.shape:
        raise ValueError(f"feature shapes differ: {f_t.shape} vs {f_s.shape}")
    _check_signal(f_t, "template features")
    _check_signal(f_s, "source features")
    spec_t, lp_t = logpolar_features(f_t, config)
    spec_s, lp_s = logpolar_features(f_s, config)
    _check_signal(lp_t.values, "template log-polar map")
    _check_signal(lp_s.values, "source log-polar map")
    cmap = correlation_map(lp_t.values, lp_s.values, config.beta_rotscale,
                           config.rotscale_phase_norm, ("log-scale", "angle"))
    _finish_map(cmap, config.soft_window, circular_cols_only=True)
    cmap.base = lp_t.base
    if stages is not None:
        stages.update(spectrum_template=spec_t.magnitude, spectrum_source=spec_s.magnitude,
                      logpolar_template=lp_t.values, logpolar_source=lp_s.values)
    theta, scale = rotscale_readout(_readout(cmap, config), lp_t.base, lp_t.values.shape[-1])
    return theta, scale, cmap


def _readout(cmap, config):
    if config.readout == "hard":
        return cmap.hard
    if config.readout == "soft":
        return cmap.soft.data
    if config.readout == "refined":
        return cmap.refined
    raise ValueError(f"unknown readout {config.readout!r}")


# -- translation --------------------------------------------------------------

def estimate_translation(f_t, f_s_aligned, config: EstimatorConfig = None):
    """Translation (tx, ty) in pixels that moves ``f_t`` onto ``f_s_aligned``.

    Shifts are signed within [-H/2, H/2).
    """
    config = config or EstimatorConfig()
    f_t, f_s_aligned = dc._wrap(f_t), dc._wrap(f_s_aligned)
    if f_t.shape != f_s_aligned.shape:
        raise ValueError(f"feature shapes differ: {f_t.shape} vs {f_s_aligned.shape}")
    _check_signal(f_t, "template features")
    _check_signal(f_s_aligned, "source features")
    cmap = correlation_map(f_t, f_s_aligned, config.beta_trans, config.trans_phase_norm, ("y", "x"))
    _finish_map(cmap, config.soft_window, circular_cols_only=False)
    rc = _readout(cmap, config)
    return np.stack([rc[..., 1], rc[..., 0]], axis=-1), cmap


# -- full registration --------------------------------------------------------

def _features(extractors, role, x):
    if extractors is None:
        return x
    return extractors.apply(role, x)


def rotation_candidates(theta, config: EstimatorConfig):
    """Rotations to try in the translation stage.

    The magnitude spectrum cannot tell ``theta`` from ``theta + pi``. In full
    circle mode both are tried; in half range mode ``theta - pi`` is tried
    only when ``theta`` lies within the wrap margin of pi, where a true
    rotation just above 0 can be read as just below pi.
    """
    if config.full_circle:
        return [theta, theta + math.pi]
    if theta > math.pi - math.radians(config.wrap_margin_deg):
        return [theta, theta - math.pi]
    return [theta]


def _translation_stage(template, source, theta, scale, config, extractors):
    unwarp = PoseSim2(1.0 / scale, -theta, 0.0, 0.0)
    src_aligned = warp_sim2(source, unwarp)
    f_t = _features(extractors, "template_trans", template)
    f_s = _features(extractors, "source_trans", src_aligned)
    t_res, cmap = estimate_translation(f_t, f_s, config)
    r = scale * np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    t = r @ np.asarray(t_res, dtype=np.float64)
    peak = float(cmap.raw.data.max())
    return t, cmap, peak, {"source_aligned": src_aligned, "features_template_trans": f_t,
                           "features_source_trans": f_s}


def rotation_disambiguation(template, source, theta, scale, config: EstimatorConfig = None,
                            extractors=None):
    """Choose between ``theta`` and ``theta + pi`` by translation peak height.

    With a half-range configuration ``theta`` is returned unchanged.
    """
    config = config or EstimatorConfig()
    if not config.full_circle:
        return theta
    best = max(((_translation_stage(template, source, th, scale, config, extractors)[2], th)
                for th in (theta, theta + math.pi)), key=lambda x: x[0])
    return best[1] % TWO_PI


def soft_pose(template, source, extractors=None, config: EstimatorConfig = None):
    """Pose from soft readouts only, differentiable end to end.

    The source is un-warped by the soft (theta, scale) before the translation
    stage, so gradients flow through both stages. Returns Tensors
    ``theta``, ``log_scale``, ``tx``, ``ty`` (scalars).
    """
    config = config or EstimatorConfig()
    template, source = dc._wrap(template), dc._wrap(source)
    f_t = _features(extractors, "template_rot", template)
    f_s = _features(extractors, "source_rot", source)
    _, _, rs_map = estimate_rotation_scale(f_t, f_s, config)
    cols = rs_map.p.shape[-1]
    row, col = dc.gather(rs_map.soft, 0), dc.gather(rs_map.soft, 1)
    theta = dc.scale(col, math.pi / cols)
    log_s = dc.scale(row, -math.log(rs_map.base))
    aligned = warp_sim2(source, (dc.exp(dc.neg(log_s)), dc.neg(theta), 0.0, 0.0))
    g_t = _features(extractors, "template_trans", template)
    g_s = _features(extractors, "source_trans", aligned)
    cmap = correlation_map(g_t, g_s, config.beta_trans, config.trans_phase_norm, ("y", "x"))
    _finish_map(cmap, config.soft_window, circular_cols_only=False)
    ry, rx = dc.gather(cmap.soft, 0), dc.gather(cmap.soft, 1)
    s = dc.exp(log_s)
    ct, st = dc.cos(theta), dc.sin(theta)
    tx = dc.mul(s, dc.sub(dc.mul(ct, rx), dc.mul(st, ry)))
    ty = dc.mul(s, dc.add(dc.mul(st, rx), dc.mul(ct, ry)))
    return {"theta": theta, "log_scale": log_s, "tx": tx, "ty": ty}


def register(template, source, extractors=None, config: EstimatorConfig = None) -> PoseEstimate:
    """Estimate the pose mapping ``template`` onto ``source``.

    Without ``extractors`` this is the conventional phase-correlation
    baseline. ``extractors`` provides ``apply(role, image)`` for the roles
    template_rot, source_rot, template_trans and source_trans.
    """
    config = config or EstimatorConfig()
    template, source = dc._wrap(template), dc._wrap(source)
    if template.shape != source.shape or template.ndim != 2 or template.shape[0] != template.shape[1]:
        raise ValueError(f"register needs equal square 2D images, got {template.shape} and {source.shape}")
    stages = {}
    try:
        f_t = _features(extractors, "template_rot", template)
        f_s = _features(extractors, "source_rot", source)
        stages.update(features_template_rot=f_t, features_source_rot=f_s)
        theta, scale, rs_map = estimate_rotation_scale(f_t, f_s, config, stages)
    except (RegistrationError, ValueError) as exc:
        raise RegistrationError(f"rotation-scale stage failed: {exc}") from exc
    theta, scale = float(theta), float(scale)
    try:
        best = None
        for cand in rotation_candidates(theta, config):
            res = _translation_stage(template, source, cand, scale, config, extractors)
            if best is None or res[2] > best[2]:
                best = res + (cand,)
    except (RegistrationError, ValueError) as exc:
        raise RegistrationError(f"translation stage failed: {exc}") from exc
    t, tr_map, _, tr_stages, theta_used = best
    stages.update(tr_stages)
    theta_out = theta_used % TWO_PI if config.full_circle else theta_used % math.pi
    pose = PoseSim2(scale, theta_out, t[0], t[1])
    cols = rs_map.p.shape[-1]
    soft_th, soft_s = rotscale_readout(rs_map.soft.data, rs_map.base, cols)
    hard_th, hard_s = rotscale_readout(rs_map.hard, rs_map.base, cols)
    sharp = {"rotscale": float(rs_map.sharpness), "translation": float(tr_map.sharpness)}
    return PoseEstimate(
        pose=pose,
        rotscale=rs_map,
        translation=tr_map,
        soft={"theta": float(soft_th), "scale": float(soft_s),
              "t_residual": (float(tr_map.soft.data[1]), float(tr_map.soft.data[0]))},
        hard={"theta": float(hard_th), "scale": float(hard_s),
              "t_residual": (float(tr_map.hard[1]), float(tr_map.hard[0]))},
        sharpness=sharp,
        ambiguous=min(sharp.values()) < config.ambiguity_threshold,
        stages=stages,
    )
