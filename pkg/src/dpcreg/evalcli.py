"""Metrics, diagnostics and the ``dpcreg`` command-line interface."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from dpcreg import datasynth, training
from dpcreg import estimator as est
from dpcreg.config import apply_overrides, config_hash, load_config
from dpcreg.features import CheckpointError, ExtractorSet

log = logging.getLogger("dpcreg")

QUANTITIES = ("x", "y", "rotation", "scale")
UNITS = {"x": "px", "y": "px", "rotation": "deg", "scale": "x"}
THRESHOLDS = {"x": (5.0,), "y": (5.0,), "rotation": (1.0,), "scale": (0.05, 0.2)}
PERIODS = {"rotation": 180.0}


# -- metrics ---------------------------------------------------------------------

def _as_rows(poses):
    """(N, 4) array of (tx, ty, theta in degrees, scale)."""
    rows = []
    for p in poses:
        if isinstance(p, est.PoseSim2):
            rows.append((p.tx, p.ty, math.degrees(p.theta), p.s))
        else:
            tx, ty, th, s = p
            rows.append((tx, ty, math.degrees(th), s))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def quantity_errors(estimates, truths, period=None):
    """Absolute errors; on a periodic axis the shorter way round."""
    d = np.asarray(estimates, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    if period:
        d = (d + period / 2.0) % period - period / 2.0
    return np.abs(d)


def quantity_metrics(estimates, truths, thresholds, period=None):
    """(E, {t: Acc}) for one quantity: mean squared error and percent within t."""
    if len(estimates) == 0:
        raise ValueError("no estimates to score")
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimates vs {len(truths)} ground truths")
    err = quantity_errors(estimates, truths, period)
    mse = float(np.mean(err ** 2))
    acc = {float(t): 100.0 * int(np.count_nonzero(err <= t)) / err.size for t in thresholds}
    return mse, acc


@dataclass
class MetricsReport:
    """Per-quantity MSE and accuracy, plus run metadata.

    ``mse`` is in squared units of each quantity (px^2, deg^2, scale^2).
    """

    n: int
    mse: dict
    acc: dict
    runtime_ms: float = float("nan")
    config_hash: str = ""
    dataset_tag: str = ""
    extra: dict = field(default_factory=dict)

    def columns(self):
        """Flat (name, value) pairs in table order: E then Acc per quantity, then runtime."""
        out = []
        for q in QUANTITIES:
            out.append((f"E_{q}[{UNITS[q]}^2]", self.mse[q]))
            for t, a in self.acc[q].items():
                out.append((f"Acc_{q}_{t:g}", a))
        out += [("runtime_ms", self.runtime_ms), ("N", self.n),
                ("config_hash", self.config_hash), ("dataset", self.dataset_tag)]
        return out

    def to_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([c for c, _ in cols])
            w.writerow([_fmt(v) for _, v in cols])

    def summary(self):
        parts = []
        for q in QUANTITIES:
            accs = " ".join(f"Acc@{t:g}={a:.1f}%" for t, a in self.acc[q].items())
            parts.append(f"{q}: E={self.mse[q]:.4g} {accs}")
        return f"N={self.n} " + "; ".join(parts) + f"; runtime {self.runtime_ms:.1f} ms/pair"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def compute_metrics(estimates, truths, thresholds=None, runtime_ms=float("nan"),
                    config_hash="", dataset_tag=""):
    """Score pose estimates against ground truth.

    ``estimates`` and ``truths`` hold PoseSim2 objects or (tx, ty, theta_rad,
    scale) tuples. Rotation errors are circular modulo 180 degrees.
    """
    thresholds = thresholds or THRESHOLDS
    e, g = _as_rows(estimates), _as_rows(truths)
    if len(e) == 0:
        raise ValueError("no estimates to score")
    if len(e) != len(g):
        raise ValueError(f"{len(e)} estimates vs {len(g)} ground truths")
    mse, acc = {}, {}
    for k, q in enumerate(QUANTITIES):
        mse[q], acc[q] = quantity_metrics(e[:, k], g[:, k], thresholds[q], PERIODS.get(q))
    return MetricsReport(len(e), mse, acc, runtime_ms, config_hash, dataset_tag)


def accuracy_curve(estimates, truths, quantity, thresholds=range(20)):
    """Acc (percent) at each threshold, for translation in px or rotation in degrees."""
    k = QUANTITIES.index(quantity)
    e, g = _as_rows(estimates)[:, k], _as_rows(truths)[:, k]
    err = quantity_errors(e, g, PERIODS.get(quantity))
    return np.array([100.0 * np.mean(err <= t) for t in thresholds])


def write_curves_csv(path, curves, thresholds=range(20)):
    names = list(curves)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold"] + names)
        for i, t in enumerate(thresholds):
            w.writerow([t] + [f"{curves[n][i]:.4g}" for n in names])


def render_curves_png(path, curves, thresholds=range(20), size=(480, 320)):
    """Plot Acc-vs-threshold polylines with plain axes and ticks."""
    w, h = size
    left, right, top, bottom = 44, 12, 12, 30
    img = Image.new("RGB", size, "white")
    draw = ImageDraw.Draw(img)
    ts = list(thresholds)
    x0, x1, y0, y1 = left, w - right, h - bottom, top
    draw.line([(x0, y1), (x0, y0), (x1, y0)], fill="black")

    def px(t, a):
        fx = (t - ts[0]) / max(ts[-1] - ts[0], 1)
        return x0 + fx * (x1 - x0), y0 - a / 100.0 * (y0 - y1)

    for a in (0, 25, 50, 75, 100):
        _, yy = px(ts[0], a)
        draw.line([(x0 - 4, yy), (x0, yy)], fill="black")
        draw.text((4, yy - 6), f"{a}", fill="black")
    for t in ts[::max(1, len(ts) // 5)]:
        xx, _ = px(t, 0)
        draw.line([(xx, y0), (xx, y0 + 4)], fill="black")
        draw.text((xx - 4, y0 + 8), f"{t}", fill="black")
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    for i, (name, vals) in enumerate(curves.items()):
        color = palette[i % len(palette)]
        draw.line([px(t, a) for t, a in zip(ts, vals)], fill=color, width=2)
        draw.text((x1 - 90, y1 + 4 + 12 * i), name, fill=color)
    img.save(path)
    return path


# -- diagnostics -------------------------------------------------------------------

def _gray_png(path, arr):
    a = np.asarray(arr, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    u8 = np.zeros(a.shape, np.uint8) if hi <= lo else np.round((a - lo) / (hi - lo) * 255).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def dump_diagnostics(estimate: est.PoseEstimate, directory, template=None, source=None):
    """Write every stage tensor as a normalized grayscale PNG plus ``readouts.json``.

    Returns (written paths, failures); failures are (file name, message) pairs
    and do not stop the remaining files from being written.
    """
    os.makedirs(directory, exist_ok=True)
    maps = {}
    if template is not None:
        maps["template"] = template
    if source is not None:
        maps["source"] = source
    for k, v in estimate.stages.items():
        maps[k] = v
    for stage, cmap in (("rotscale", estimate.rotscale), ("translation", estimate.translation)):
        maps[f"{stage}_correlation"] = cmap.raw
        maps[f"{stage}_probability"] = cmap.p
    written, failures = [], []
    for name, arr in maps.items():
        data = arr.data if isinstance(arr, est.Tensor) else np.asarray(arr)
        path = os.path.join(directory, f"{name}.png")
        try:
            _gray_png(path, data)
            written.append(path)
        except (OSError, ValueError) as exc:
            failures.append((f"{name}.png", str(exc)))
    p = estimate.pose
    readouts = {
        "pose": {"tx": p.tx, "ty": p.ty, "theta_deg": math.degrees(p.theta), "scale": p.s},
        "soft": estimate.soft, "hard": estimate.hard, "sharpness": estimate.sharpness,
        "ambiguous": estimate.ambiguous,
    }
    path = os.path.join(directory, "readouts.json")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(readouts, fh, indent=2, sort_keys=True)
        written.append(path)
    except OSError as exc:
        failures.append(("readouts.json", str(exc)))
    for name, msg in failures:
        log.error("diagnostics: could not write %s: %s", name, msg)
    return written, failures


# -- presets and evaluation ---------------------------------------------------------

def baseline_config(**kw):
    """Conventional phase correlation: window, high-pass, phase-normalized correlation."""
    return est.EstimatorConfig(**kw)


def learned_config(**kw):
    """Settings the extractors are trained with (see ``TrainConfig.estimator_config``)."""
    return dataclasses.replace(training.TrainConfig().estimator_config(), **kw)


def evaluate_pairs(pairs, extractors=None, config=None, dataset_tag=""):
    """Register every pair; returns (MetricsReport, estimates).

    The runtime covers ``register`` calls only. Pairs whose registration
    fails count with the identity pose.
    """
    config = config or (baseline_config() if extractors is None else learned_config())
    estimates, seconds = [], []
    failures = 0
    for pair in pairs:
        t0 = time.perf_counter()
        try:
            pose = est.register(pair.template, pair.source, extractors, config).pose
        except est.RegistrationError as exc:
            failures += 1
            log.warning("pair seed %s: %s", pair.seed, exc)
            pose = est.PoseSim2()
        seconds.append(time.perf_counter() - t0)
        estimates.append(pose)
    report = compute_metrics(estimates, [p.pose for p in pairs], runtime_ms=1e3 * float(np.mean(seconds)),
                             config_hash=config_hash(config), dataset_tag=dataset_tag)
    report.extra["failures"] = failures
    return report, estimates


def write_evaluation(report, estimates, pairs, out):
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "metrics.csv"))
    curves = {q: accuracy_curve(estimates, [p.pose for p in pairs], q) for q in ("x", "y", "rotation")}
    write_curves_csv(os.path.join(out, "accuracy_curves.csv"), curves)
    render_curves_png(os.path.join(out, "accuracy_curves.png"), curves)
    with open(os.path.join(out, "estimates.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "tx", "ty", "theta", "scale", "gt_tx", "gt_ty", "gt_theta", "gt_scale"])
        for e, p in zip(estimates, pairs):
            g = p.pose
            w.writerow([p.seed] + [repr(v) for v in (e.tx, e.ty, e.theta, e.s, g.tx, g.ty, g.theta, g.s)])


# -- selftest ---------------------------------------------------------------------------

def selftest(verbose=True):
    """Gradient checks and oracle equivalences; returns a list of (name, ok, detail)."""
    from dpcreg import diffcore as dc
    from dpcreg import gradcheck, spectral

    rng = np.random.default_rng(0)
    results = []

    def record(name, ok, detail):
        results.append((name, bool(ok), detail))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")

    a, b = rng.random((8, 8)), rng.random((8, 8))
    fast = spectral.circular_cross_correlation(a, b).data
    slow = np.array([[np.sum(a * np.roll(b, (-i, -j), (0, 1))) for j in range(8)] for i in range(8)])
    err = float(np.max(np.abs(fast - slow)))
    record("correlation-vs-bruteforce", err < 1e-9, f"max err {err:.2e}")
    err = float(np.max(np.abs(dc.fft2(a).numpy() - np.fft.fft2(a))))
    record("fft-vs-numpy", err < 1e-9, f"max err {err:.2e}")
    shifted = np.roll(a, (3, -2), (0, 1))
    err = float(np.max(np.abs(np.abs(np.fft.fft2(a)) - dc.magnitude(dc.fft2(shifted)).data)))
    record("spectrum-shift-invariance", err < 1e-6, f"max err {err:.2e}")
    checks = {
        "grad-correlation": (lambda x, y: spectral.circular_cross_correlation(x, y, True), [a, b]),
        "grad-logpolar": (lambda x: spectral.logpolar_resample(spectral.Spectrum(x, x.shape), 8, 16).values,
                          [rng.random((16, 16))]),
        "grad-softmax": (lambda x: dc.softmax_with_temperature(x, 3.0, axes=(-2, -1)), [a]),
        "grad-conv": (lambda x, w: dc.conv2d(x, w, None, padding=1), [rng.random((1, 2, 6, 6)),
                                                                      rng.random((3, 2, 3, 3))]),
        "grad-warp": (lambda x, th: est.warp_sim2(x, (1.05, th, 0.3, -0.4)), [a, np.array(0.3)]),
    }
    for name, (fn, args) in checks.items():
        err = gradcheck.check(fn, args)
        record(name, err < 1e-4, f"rel err {err:.2e}")
    nets = ExtractorSet.init(training.TrainConfig(depth=1, channels=2, size=16).topology())
    clone = ExtractorSet.from_bytes(nets.to_bytes())
    img = rng.random((16, 16))
    ok = np.array_equal(clone.apply("source_rot", img).data, nets.apply("source_rot", img).data)
    record("checkpoint-round-trip", ok and clone.to_bytes() == nets.to_bytes(), "bit-exact" if ok else "mismatch")
    pair = datasynth.make_pair(1, "homogeneous", size=64, ranges=datasynth.PoseRanges.for_size(64))
    pose = est.register(pair.template, pair.source).pose
    err = max(abs(pose.tx - pair.pose.tx), abs(pose.ty - pair.pose.ty))
    record("register-homogeneous", err < 2, f"translation err {err:.2f} px")
    return results


# -- command line -----------------------------------------------------------------------

def _add_common(p, dataset=False, checkpoint=False, out=False):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--size", type=int, help="image size (power of two)")
    p.add_argument("--seed", type=int, help="random seed")
    if dataset:
        p.add_argument("--dataset", help="dataset directory (manifest.csv + PNGs)")
    if checkpoint:
        p.add_argument("--checkpoint", help="extractor checkpoint ('pretrained' selects the shipped one)")
    if out:
        p.add_argument("--out", help="output directory")


def _add_estimator(p):
    p.add_argument("--beta-trans", type=float, help="softmax temperature of the translation map")
    p.add_argument("--beta-rotscale", type=float, help="softmax temperature of the rotation-scale map")
    p.add_argument("--baseline", action="store_true", help="no extractors: conventional phase correlation")


def build_parser():
    parser = argparse.ArgumentParser(prog="dpcreg", description="Learned phase-correlation image registration.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    _add_common(p, out=True)
    p.add_argument("--tag", choices=datasynth.TAGS[:3], help="pair set (default homogeneous)")
    p.add_argument("--count", type=int, help="number of pairs (default 200)")

    p = sub.add_parser("train", help="train one phase of the extractors")
    _add_common(p, dataset=True, checkpoint=True, out=True)
    _add_estimator(p)
    p.add_argument("--phase", type=int, choices=(1, 2), help="training phase (default 1)")
    p.add_argument("--steps", type=int)
    p.add_argument("--val-dataset")
    p.add_argument("--init-checkpoint", help="start from these weights (phase 2: the phase-1 result)")

    p = sub.add_parser("register", help="register two PNG images")
    p.add_argument("template")
    p.add_argument("source")
    _add_common(p, checkpoint=True, out=True)
    _add_estimator(p)
    p.add_argument("--diagnostics", action="store_true", help="dump stage images into --out")

    for name, text in (("evaluate", "score a dataset"), ("baseline", "evaluate without extractors")):
        p = sub.add_parser(name, help=text)
        _add_common(p, dataset=True, checkpoint=True, out=True)
        _add_estimator(p)
        p.add_argument("--diagnostics", action="store_true", help="dump stage images of the first pair")

    sub.add_parser("selftest", help="gradient checks and oracle equivalences")
    return parser


def _file_config(args):
    return load_config(args.config) if getattr(args, "config", None) else {}


def _estimator_config(args, extractors):
    values = _file_config(args)
    cfg = baseline_config() if extractors is None else learned_config()
    cfg = apply_overrides(cfg, {k: v for k, v in values.items()
                                if k in {f.name for f in dataclasses.fields(cfg)}})
    if args.beta_trans is not None:
        cfg = dataclasses.replace(cfg, beta_trans=args.beta_trans)
    if args.beta_rotscale is not None:
        cfg = dataclasses.replace(cfg, beta_rotscale=args.beta_rotscale)
    return cfg


def _extractors(args):
    if getattr(args, "baseline", False) or args.command == "baseline" or not args.checkpoint:
        return None
    if args.checkpoint == "pretrained":
        return ExtractorSet.pretrained()
    return ExtractorSet.load(args.checkpoint, dtype=np.float64)


def _cmd_generate(args):
    values = _file_config(args)
    size = args.size or values.get("size", 128)
    count = args.count or values.get("count", 200)
    seed = args.seed if args.seed is not None else values.get("seed", 0)
    tag = args.tag or values.get("tag", "homogeneous")
    ranges = datasynth.PoseRanges.for_size(size)
    keys = {"tx", "ty", "theta", "scale"}
    bounds = {k[:-4]: (values[k[:-4] + "_min"], values[k[:-4] + "_max"])
              for k in [k for k in values if k.endswith("_min")] if k[:-4] in keys}
    if bounds:
        ranges = dataclasses.replace(ranges, **bounds)
    if not args.out:
        raise ValueError("generate-data needs --out")
    pairs = datasynth.generate(range(seed, seed + count), tag, size, ranges)
    path = datasynth.write_dataset(args.out, pairs)
    print(f"wrote {count} {tag} pairs to {path}")


def _cmd_train(args):
    cfg = apply_overrides(training.TrainConfig(), _file_config(args), strict=False)
    for flag, key in (("phase", "phase"), ("steps", "steps"), ("seed", "seed"), ("size", "size"),
                      ("dataset", "dataset"), ("val_dataset", "val_dataset"), ("checkpoint", "checkpoint"),
                      ("init_checkpoint", "init_checkpoint"), ("beta_trans", "beta_trans"),
                      ("beta_rotscale", "beta_rotscale")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg = dataclasses.replace(cfg, **{key: v})
    if not cfg.dataset:
        raise ValueError("train needs --dataset (or dataset = ... in the config)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        cfg = dataclasses.replace(cfg, log_path=os.path.join(args.out, f"train_phase{cfg.phase}.csv"))
    _, rows = training.train(cfg)
    last = rows[-1]
    print(f"phase {cfg.phase}: {len(rows)} steps, final loss {last[2]:.4f}, checkpoint {cfg.checkpoint}, "
          f"config {config_hash(cfg)}")


def _read_gray(path):
    try:
        return datasynth.load_png(path)
    except OSError as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc


def _cmd_register(args):
    extractors = _extractors(args)
    cfg = _estimator_config(args, extractors)
    t, s = _read_gray(args.template), _read_gray(args.source)
    e = est.register(t, s, extractors, cfg)
    p = e.pose
    print(f"{p.tx:.2f} {p.ty:.2f} {math.degrees(p.theta):.2f} {p.s:.3f}")
    if args.diagnostics:
        _, failures = dump_diagnostics(e, args.out or "diagnostics", t, s)
        if failures:
            return 1
    return 0


def _cmd_evaluate(args):
    extractors = _extractors(args)
    if args.command == "evaluate" and extractors is None and not args.baseline:
        raise ValueError("evaluate needs --checkpoint or --baseline")
    if not args.dataset:
        raise ValueError(f"{args.command} needs --dataset")
    cfg = _estimator_config(args, extractors)
    pairs = datasynth.read_dataset(args.dataset)
    tags = sorted({p.tag for p in pairs})
    report, estimates = evaluate_pairs(pairs, extractors, cfg, dataset_tag="+".join(tags))
    out = args.out or "evaluation"
    write_evaluation(report, estimates, pairs, out)
    if args.diagnostics and pairs:
        e = est.register(pairs[0].template, pairs[0].source, extractors, cfg)
        dump_diagnostics(e, os.path.join(out, "diagnostics"), pairs[0].template, pairs[0].source)
    print(report.summary())
    print(f"config {report.config_hash}; results in {out}")
    return 0


def _cmd_selftest(args):
    results = selftest(verbose=True)
    failed = [r for r in results if not r[1]]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "register": _cmd_register,
    "evaluate": _cmd_evaluate,
    "baseline": _cmd_evaluate,
    "selftest": _cmd_selftest,
}


def main(argv=None):
    """Run the CLI; returns the exit code (2 for usage errors, 1 for runtime failures)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except (ValueError, OSError, CheckpointError, est.RegistrationError, training.TrainingError) as exc:
        print(f"dpcreg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
