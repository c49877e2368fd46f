"""Two-phase end-to-end training of the feature extractors.

Phase 1 fits the rotation-scale extractors through the log-polar correlation
map; phase 2 fits the translation extractors on sources de-rotated and
de-scaled by either the ground truth or the frozen phase-1 estimate. Both
phases mix a KL loss against a Gaussian one-peak target with an L1 loss on
the soft-argmax expectation.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from dpcreg import datasynth, estimator as est
from dpcreg import diffcore as dc
from dpcreg.config import config_hash
from dpcreg.diffcore import Tensor
from dpcreg.features import ROLES, ExtractorSet, Topology

log = logging.getLogger(__name__)

PHASE_ROLES = {1: ROLES[:2], 2: ROLES[2:]}
LOG_COLUMNS = ("step", "phase", "loss", "kl", "expectation", "val_x", "val_y", "val_rot", "val_scale", "seconds",
               "cpu_seconds")


class TrainingError(RuntimeError):
    """Training diverged or received invalid input."""


@dataclass
class TrainConfig:
    phase: int = 1
    lr: float = 1e-3
    batch: int = 8
    steps: int = 1500
    w_kl: float | None = None
    w_exp: float | None = None
    beta_trans: float = 30.0
    beta_rotscale: float = 15.0
    sigma: float = 1.5
    seed: int = 0
    dataset: str = ""
    val_dataset: str = ""
    val_count: int = 100
    val_every: int = 250
    checkpoint: str = "checkpoint.dpcn"
    init_checkpoint: str = ""
    log_path: str = ""
    gt_warp_fraction: float = 0.5
    polarity_pairs: bool = True
    lr_schedule: str = "cosine"
    lr_floor: float = 0.1
    keep_best: bool = True
    joint: bool = False
    depth: int = 3
    channels: int = 8
    size: int = 128
    head: str = "sigmoid"

    def weights(self):
        """(w_kl, w_exp); defaults 1:1 for phase 1 and 5:1 for phase 2."""
        default = (1.0, 1.0) if self.phase == 1 else (5.0, 1.0)
        w = (default[0] if self.w_kl is None else self.w_kl, default[1] if self.w_exp is None else self.w_exp)
        if w[0] < 0 or w[1] < 0 or w[0] + w[1] == 0:
            raise ValueError(f"loss weights must be >= 0 and not both zero, got {w}")
        return w

    def topology(self):
        return Topology(self.depth, self.channels, self.size, self.head)

    def estimator_config(self):
        return est.EstimatorConfig(beta_trans=self.beta_trans, beta_rotscale=self.beta_rotscale)


# -- targets and losses -----------------------------------------------------------

@dataclass
class TargetDistribution:
    """Gaussian one-peak target on a circular grid, centered at a fractional bin."""

    shape: tuple
    center: tuple
    sigma: float = 1.5

    def grid(self):
        h, w = self.shape
        dr = _wrap(np.arange(h) - self.center[0], h)
        dcol = _wrap(np.arange(w) - self.center[1], w)
        g = np.exp(-(dr[:, None] ** 2 + dcol[None, :] ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()


def target_batch(shape, centers, sigma, dtype=np.float64):
    """Stack of target grids for (B, 2) centers given as circular bin indices."""
    return np.stack([TargetDistribution(shape, tuple(c), sigma).grid() for c in centers]).astype(dtype)


def _wrap(x, n):
    return (np.asarray(x, dtype=np.float64) + n / 2.0) % n - n / 2.0


def kl_one_peak_loss(p, target, floor=1e-12):
    """KL(target || p) summed over the last two axes and averaged over the batch."""
    p = dc._wrap(p)
    target = np.asarray(target, dtype=p.dtype)
    if p.shape != target.shape:
        raise ValueError(f"kl_one_peak_loss: shape mismatch {p.shape} vs {target.shape}")
    const = float(np.sum(target * np.log(np.maximum(target, floor))))
    cross = dc.sum(dc.mul_const(dc.log(p, floor=floor), target))
    batch = p.shape[0] if p.ndim == 3 else 1
    return dc.scale(dc.shift(dc.neg(cross), const), 1.0 / batch)


def expectation_loss(estimate, truth, periods=None):
    """Mean L1 distance per item, summed over axes.

    ``periods`` gives the period of each axis (None for linear axes); the
    difference on a periodic axis is wrapped into [-P/2, P/2).
    """
    estimate = dc._wrap(estimate)
    truth = np.asarray(truth, dtype=estimate.dtype).reshape(estimate.shape)
    diff = dc.sub(estimate, Tensor(truth))
    if periods is not None:
        shift = np.zeros(estimate.shape, dtype=estimate.dtype)
        for k, per in enumerate(periods):
            if per:
                d = diff.data[..., k]
                shift[..., k] = _wrap(d, per) - d
        diff = dc.add(diff, Tensor(shift))
    batch = estimate.shape[0] if estimate.ndim == 2 else 1
    return dc.scale(dc.sum(dc.abs_(diff)), 1.0 / batch)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    """Adam with bias-corrected moments (decays 0.9 / 0.999, eps 1e-8)."""

    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step(self.params, grads, self, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def optimizer_step(params, grads, state: Adam, lr):
    """One Adam update of ``params`` in place; aborts on non-finite gradients."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient")
    state.t += 1
    b1, b2 = state.b1, state.b2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        if lr == 0:
            continue
        step = lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


# -- batched forward passes ------------------------------------------------------------

def rotscale_forward(nets: ExtractorSet, templates, sources, cfg: est.EstimatorConfig):
    """Correlation map (with soft readout) of the rotation-scale stage for a batch."""
    f_t = nets.apply("template_rot", templates)
    f_s = nets.apply("source_rot", sources)
    _, lp_t = est.logpolar_features(f_t, cfg)
    _, lp_s = est.logpolar_features(f_s, cfg)
    cmap = est.correlation_map(lp_t.values, lp_s.values, cfg.beta_rotscale, cfg.rotscale_phase_norm,
                               ("log-scale", "angle"))
    est._finish_map(cmap, cfg.soft_window, circular_cols_only=True)
    cmap.base = lp_t.base
    return cmap


def translation_forward(nets: ExtractorSet, templates, aligned, cfg: est.EstimatorConfig):
    f_t = nets.apply("template_trans", templates)
    f_s = nets.apply("source_trans", aligned)
    cmap = est.correlation_map(f_t, f_s, cfg.beta_trans, cfg.trans_phase_norm, ("y", "x"))
    est._finish_map(cmap, cfg.soft_window, circular_cols_only=False)
    return cmap


def logpolar_base(n, cfg: est.EstimatorConfig):
    rows, cols = cfg.grid(n)
    return est.spectral.logpolar_grid((n, n), rows, cols)[2]


def residual_translation(poses, thetas, scales):
    """Translation left after un-warping by (thetas, scales): R(-theta) t / s."""
    t = np.array([[p.tx, p.ty] for p in poses])
    c, s = np.cos(thetas), np.sin(thetas)
    rx = (c * t[:, 0] + s * t[:, 1]) / scales
    ry = (-s * t[:, 0] + c * t[:, 1]) / scales
    return np.stack([rx, ry], axis=1)


def nearest_branch(theta_est, theta_true):
    """Shift each estimate by a multiple of pi to lie closest to the truth."""
    k = np.round((np.asarray(theta_true) - np.asarray(theta_est)) / math.pi)
    return np.asarray(theta_est) + k * math.pi


def unwarp_batch(sources, thetas, scales):
    poses = (1.0 / np.asarray(scales), -np.asarray(thetas), np.zeros(len(scales)), np.zeros(len(scales)))
    with dc.no_grad():
        return est.warp_sim2(Tensor(sources), poses).data


# -- data -------------------------------------------------------------------------------

class PairArrays:
    """Dataset held as float arrays for batching."""

    def __init__(self, pairs, dtype=np.float32):
        if not pairs:
            raise TrainingError("empty dataset")
        self.templates = np.stack([p.template for p in pairs]).astype(dtype)
        self.sources = np.stack([p.source for p in pairs]).astype(dtype)
        self.poses = [p.pose for p in pairs]
        self.tags = [p.tag for p in pairs]

    def __len__(self):
        return len(self.poses)

    def subset(self, idx):
        out = PairArrays.__new__(PairArrays)
        out.templates, out.sources = self.templates[idx], self.sources[idx]
        out.poses = [self.poses[i] for i in idx]
        out.tags = [self.tags[i] for i in idx]
        return out

    @classmethod
    def from_dir(cls, directory, dtype=np.float32):
        return cls(datasynth.read_dataset(directory), dtype)


def _split(cfg: TrainConfig):
    data = PairArrays.from_dir(cfg.dataset)
    if cfg.val_dataset:
        return data, PairArrays.from_dir(cfg.val_dataset)
    k = min(cfg.val_count, len(data) // 5)
    if k == 0:
        return data, None
    idx = np.arange(len(data))
    return data.subset(idx[:-k]), data.subset(idx[-k:])


# -- validation ------------------------------------------------------------------------

def predict_rotscale(nets, data: PairArrays, cfg: est.EstimatorConfig, chunk=25):
    """Refined (theta, scale) estimates for every pair, batched."""
    thetas, scales = [], []
    with dc.no_grad():
        for i in range(0, len(data), chunk):
            cmap = rotscale_forward(nets, Tensor(data.templates[i:i + chunk]),
                                    Tensor(data.sources[i:i + chunk]), cfg)
            th, sc = est.rotscale_readout(cmap.refined, cmap.base, cmap.p.shape[-1])
            thetas.append(th)
            scales.append(sc)
    return np.concatenate(thetas), np.concatenate(scales)


def predict_translation(nets, data: PairArrays, thetas, scales, cfg: est.EstimatorConfig, chunk=25):
    """Translation estimates given phase-1 (theta, scale); tries theta - pi near the wrap."""
    n = len(data)
    best_peak = np.full(n, -np.inf)
    best_t = np.zeros((n, 2))
    best_th = thetas.copy()
    margin = math.radians(cfg.wrap_margin_deg)
    for cand_shift in (0.0, -math.pi):
        cand = thetas + cand_shift
        active = np.ones(n, bool) if cand_shift == 0.0 else thetas > math.pi - margin
        idx = np.flatnonzero(active)
        with dc.no_grad():
            for i in range(0, len(idx), chunk):
                j = idx[i:i + chunk]
                aligned = unwarp_batch(data.sources[j], cand[j], scales[j]).astype(data.sources.dtype)
                cmap = translation_forward(nets, Tensor(data.templates[j]), Tensor(aligned), cfg)
                peak = cmap.raw.data.max(axis=(-2, -1))
                res = cmap.refined[:, ::-1]
                c, s = np.cos(cand[j]), np.sin(cand[j])
                t = np.stack([c * res[:, 0] - s * res[:, 1], s * res[:, 0] + c * res[:, 1]], 1) * scales[j, None]
                better = peak > best_peak[j]
                best_peak[j[better]] = peak[better]
                best_t[j[better]] = t[better]
                best_th[j[better]] = cand[j][better]
    return best_t, best_th % math.pi


def validate(nets, data: PairArrays, cfg: est.EstimatorConfig, phase):
    """Acc (percent) of x (5 px), y (5 px), rotation (1 deg), scale (0.2)."""
    th, sc = predict_rotscale(nets, data, cfg)
    truth = np.array([[p.tx, p.ty, p.theta, p.s] for p in data.poses])
    dth = np.degrees(_wrap(th - truth[:, 2], math.pi))
    rot = 100.0 * np.mean(np.abs(dth) <= 1.0)
    scale = 100.0 * np.mean(np.abs(sc - truth[:, 3]) <= 0.2)
    if phase == 1:
        return float("nan"), float("nan"), rot, scale
    t, _ = predict_translation(nets, data, th, sc, cfg)
    x = 100.0 * np.mean(np.abs(t[:, 0] - truth[:, 0]) <= 5.0)
    y = 100.0 * np.mean(np.abs(t[:, 1] - truth[:, 1]) <= 5.0)
    return x, y, rot, scale


# -- training loops ----------------------------------------------------------------------

class _Logger:
    def __init__(self, path):
        self.fh = None
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self.fh = open(path, "w", newline="", encoding="utf-8")
            self.w = csv.writer(self.fh, lineterminator="\n")
            self.w.writerow(LOG_COLUMNS)
        self.rows = []

    def write(self, row):
        self.rows.append(row)
        if self.fh:
            self.w.writerow([_fmt(v) for v in row])
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6g}"
    return v


def _abort(nets, cfg, step, what):
    path = cfg.checkpoint + ".diverged"
    try:
        nets.save(path)
    except OSError:
        path = "(snapshot failed)"
    raise TrainingError(f"phase {cfg.phase} diverged at step {step}: {what}; snapshot {path}")


def _phase1_loss(nets, tb, sb, poses, cfg: TrainConfig, ecfg, base):
    cmap = rotscale_forward(nets, Tensor(tb), Tensor(sb), ecfg)
    rows, cols = cmap.p.shape[-2:]
    bins = est.rotscale_target_bins([p.theta for p in poses], [p.s for p in poses], base, cols)
    tgt_centers = np.stack([bins[:, 0] % rows, bins[:, 1] % cols], 1)
    target = target_batch((rows, cols), tgt_centers, cfg.sigma, cmap.p.dtype)
    kl = kl_one_peak_loss(cmap.p, target)
    # soft estimate: signed rows, circular columns (window around argmax)
    exp_l = expectation_loss(cmap.soft, bins, periods=(rows, cols))
    return kl, exp_l


def _phase2_loss(nets, tb, sb, poses, thetas, scales, cfg: TrainConfig, ecfg):
    aligned = unwarp_batch(sb, thetas, scales).astype(sb.dtype)
    cmap = translation_forward(nets, Tensor(tb), Tensor(aligned), ecfg)
    n = cmap.p.shape[-1]
    res = residual_translation(poses, thetas, scales)
    bins = np.stack([res[:, 1], res[:, 0]], 1)  # (row = y, col = x)
    target = target_batch((n, n), bins % n, cfg.sigma, cmap.p.dtype)
    kl = kl_one_peak_loss(cmap.p, target)
    exp_l = expectation_loss(cmap.soft, bins, periods=(n, n))
    return kl, exp_l


def learning_rate(cfg: TrainConfig, step):
    """Rate for 1-based ``step``: constant, or cosine decay from ``lr`` to ``lr_floor * lr``."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    if cfg.lr_schedule != "cosine":
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}; expected 'constant' or 'cosine'")
    frac = (step - 1) / (cfg.steps - 1)
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def validation_score(vals, phase):
    """Model-selection score: rotation accuracy in phase 1, the worse translation axis in phase 2."""
    return vals[2] if phase == 1 else min(vals[0], vals[1])


def polarity_paired(sources):
    """Stack ``sources`` with their intensity inversions (1 - x) along the batch axis."""
    return np.concatenate([sources, 1.0 - sources]).astype(sources.dtype, copy=False)


def _draw_batch(rng, data, cfg: TrainConfig):
    """Indices and source images of one batch.

    In phase 2 with ``polarity_pairs`` half the batch is drawn and repeated
    with inverted sources, so gradients that only fit one contrast polarity
    cancel within the batch.
    """
    paired = cfg.phase == 2 and cfg.polarity_pairs and cfg.batch >= 2
    size = min(cfg.batch // 2 if paired else cfg.batch, len(data))
    idx = rng.choice(len(data), size=size, replace=False)
    if not paired:
        return idx, data.sources[idx]
    return np.concatenate([idx, idx]), polarity_paired(data.sources[idx])


def train(cfg: TrainConfig, nets: ExtractorSet = None, data=None, val=None, progress=None):
    """Run one training phase; returns (extractors, log rows).

    ``data``/``val`` default to the manifests named in ``cfg``. Phase 2 needs
    phase-1 weights, from ``nets`` or ``cfg.init_checkpoint``.
    """
    if cfg.phase not in (1, 2):
        raise ValueError(f"phase must be 1 or 2, got {cfg.phase}")
    w_kl, w_exp = cfg.weights()
    top = cfg.topology()
    if nets is None:
        if cfg.init_checkpoint:
            nets = ExtractorSet.load(cfg.init_checkpoint, expected=top)
        elif cfg.phase == 2:
            raise TrainingError("phase 2 needs phase-1 extractors (init_checkpoint)")
        else:
            nets = ExtractorSet.init(top, cfg.seed)
    if data is None:
        data, val = _split(cfg)
    ecfg = cfg.estimator_config()
    roles = PHASE_ROLES[cfg.phase] if not (cfg.joint and cfg.phase == 2) else ROLES
    frozen = [r for r in ROLES if r not in roles]
    for r in frozen:
        for p in nets[r].parameters():
            p.requires_grad = False
    for r in roles:
        for p in nets[r].parameters():
            p.requires_grad = True
    opt = Adam(nets.parameters(roles), lr=cfg.lr)
    base = logpolar_base(cfg.size, ecfg)
    rng = np.random.default_rng([cfg.seed, cfg.phase])
    logger = _Logger(cfg.log_path)
    gt_steps = int(round(cfg.gt_warp_fraction * cfg.steps))
    learning_rate(cfg, 1)  # rejects an unknown schedule before any work
    best = (-1.0, 0, None)
    t0, c0 = time.time(), time.process_time()
    try:
        for step in range(1, cfg.steps + 1):
            opt.lr = learning_rate(cfg, step)
            idx, sb = _draw_batch(rng, data, cfg)
            tb = data.templates[idx]
            poses = [data.poses[i] for i in idx]
            if cfg.phase == 1:
                kl, exp_l = _phase1_loss(nets, tb, sb, poses, cfg, ecfg, base)
            else:
                true_th = np.array([p.theta for p in poses])
                if step <= gt_steps:
                    thetas, scales = true_th, np.array([p.s for p in poses])
                else:
                    sub = data.subset(idx)
                    thetas, scales = predict_rotscale(nets, sub, ecfg, chunk=len(idx))
                    thetas = nearest_branch(thetas, true_th)
                kl, exp_l = _phase2_loss(nets, tb, sb, poses, thetas, scales, cfg, ecfg)
            loss = dc.add(dc.scale(kl, w_kl), dc.scale(exp_l, w_exp))
            lv = loss.item()
            if not math.isfinite(lv):
                _abort(nets, cfg, step, f"loss {lv}")
            opt.zero_grad()
            dc.backward(loss)
            try:
                opt.step()
            except TrainingError as exc:
                _abort(nets, cfg, step, str(exc))
            vals = (float("nan"),) * 4
            if val is not None and cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps):
                vals = validate(nets, val, ecfg, cfg.phase)
                score = validation_score(vals, cfg.phase)
                if cfg.keep_best and score > best[0]:
                    best = (score, step, [p.data.copy() for p in nets.parameters(roles)])
            row = ((step, cfg.phase, lv, kl.item(), exp_l.item()) + tuple(vals)
                   + (time.time() - t0, time.process_time() - c0))
            logger.write(row)
            if progress is not None:
                progress(row)
            elif not math.isnan(vals[2]):
                log.info("phase %d step %d loss %.4f val x %.1f y %.1f rot %.1f scale %.1f",
                         cfg.phase, step, lv, *vals)
            elif step % 50 == 0:
                log.info("phase %d step %d loss %.4f", cfg.phase, step, lv)
    finally:
        logger.close()
        for p in nets.parameters():
            p.requires_grad = True
    if best[2] is not None and best[1] != cfg.steps:
        for p, a in zip(nets.parameters(roles), best[2]):
            p.data = a
        log.info("phase %d: keeping step %d weights (validation score %.1f)", cfg.phase, best[1], best[0])
    nets.step = nets.step + cfg.steps
    nets.config_hash = config_hash(cfg)
    if cfg.checkpoint:
        nets.save(cfg.checkpoint)
    return nets, logger.rows


def train_phase1(cfg: TrainConfig, **kw):
    cfg = _with_phase(cfg, 1)
    return train(cfg, **kw)


def train_phase2(cfg: TrainConfig, **kw):
    cfg = _with_phase(cfg, 2)
    return train(cfg, **kw)


def _with_phase(cfg, phase):
    from dataclasses import replace
    return cfg if cfg.phase == phase else replace(cfg, phase=phase)
