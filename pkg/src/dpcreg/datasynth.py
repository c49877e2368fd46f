"""Synthetic registration pairs with exact ground-truth poses.

Three sets are produced: homogeneous (source is a warped copy), heterogeneous
(the warped source is restyled) and dynamic (heterogeneous plus opaque blobs
in one image only). Pairs are persisted as 8-bit PNGs plus a CSV manifest.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import sobel, zoom

from dpcreg.estimator import PoseSim2, warp_sim2

log = logging.getLogger(__name__)

TAGS = ("homogeneous", "heterogeneous", "dynamic", "custom")
STYLES = ("invert", "gamma", "edges", "posterize", "bias")
BIAS_WEIGHT = (0.75, 0.9)
MANIFEST = "manifest.csv"
COLUMNS = ("template", "source", "tx", "ty", "theta", "scale", "tag", "seed")


@dataclass(frozen=True)
class PoseRanges:
    """Sampling bounds: translation per axis (px), rotation (rad), scale."""

    tx: tuple = (-50.0, 50.0)
    ty: tuple = (-50.0, 50.0)
    theta: tuple = (0.0, math.pi)
    scale: tuple = (0.8, 1.2)

    @classmethod
    def for_size(cls, n, reference=256):
        """Default ranges with translation scaled from a ``reference``-pixel image to ``n``."""
        k = n / reference
        return cls(tx=(-50.0 * k, 50.0 * k), ty=(-50.0 * k, 50.0 * k))

    def validate(self, n):
        lo, hi = self.scale
        if not 0 < lo <= hi:
            raise ValueError(f"scale range {self.scale} must be positive and ordered")
        for name in ("tx", "ty"):
            a, b = getattr(self, name)
            if a > b or max(abs(a), abs(b)) >= n / 2:
                raise ValueError(f"{name} range {(a, b)} must lie inside (-{n / 2}, {n / 2}) for {n}px images")
        a, b = self.theta
        if a > b or a < -2 * math.pi or b > 2 * math.pi:
            raise ValueError(f"rotation range {self.theta} outside [-2pi, 2pi]")

    def sample(self, rng):
        return PoseSim2(
            s=rng.uniform(*self.scale),
            theta=rng.uniform(*self.theta),
            tx=rng.uniform(*self.tx),
            ty=rng.uniform(*self.ty),
        )


@dataclass
class SamplePair:
    template: np.ndarray
    source: np.ndarray
    pose: PoseSim2
    tag: str
    seed: int
    style: str | None = None
    obstacle_mask: np.ndarray | None = None
    obstacle_image: str | None = None
    extra: dict = field(default_factory=dict)


# -- base images --------------------------------------------------------------

def _value_noise(rng, n, cells):
    g = rng.random((cells + 1, cells + 1))
    return zoom(g, n / (cells + 1), order=1)[:n, :n]


def _shape_mask(rng, n):
    big = Image.new("L", (2 * n, 2 * n), 0)
    draw = ImageDraw.Draw(big)
    kind = rng.integers(3)
    if kind == 0:
        k = rng.integers(3, 7)
        cx, cy = rng.random(2) * 2 * n
        r = rng.uniform(0.05, 0.25) * 2 * n
        ang = np.sort(rng.random(k)) * 2 * np.pi
        pts = [(cx + r * math.cos(a) * rng.uniform(0.5, 1), cy + r * math.sin(a) * rng.uniform(0.5, 1))
               for a in ang]
        draw.polygon(pts, fill=255)
    elif kind == 1:
        cx, cy = rng.random(2) * 2 * n
        rx, ry = rng.uniform(0.03, 0.2, 2) * 2 * n
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    else:
        x0, y0, x1, y1 = rng.random(4) * 2 * n
        draw.line([x0, y0, x1, y1], fill=255, width=int(rng.integers(2, 8)))
    # render at 2x and box-filter down for anti-aliased edges
    return (np.asarray(big, dtype=np.float64) / 255.0).reshape(n, 2, n, 2).mean(axis=(1, 3))


def _raw_base(seed, n):
    rng = np.random.default_rng(seed)
    img = 0.6 * _value_noise(rng, n, 4) + 0.25 * _value_noise(rng, n, 16)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(rng.integers(10, 41)):
        m = _shape_mask(rng, n)
        v = rng.uniform(0, 1)
        if rng.random() < 0.5:
            f = rng.uniform(0.05, 0.25)
            a = rng.uniform(0, np.pi)
            fill = v * (0.5 + 0.5 * np.sin(2 * np.pi * f * (xx * math.cos(a) + yy * math.sin(a))))
        else:
            fill = v
        img = img * (1 - m) + m * fill
    img = img - img.min()
    return img / max(img.max(), 1e-12)


def autocorrelation_margin(img, exclude=4):
    """1 minus the largest normalized circular autocorrelation outside the central peak.

    Shifts within ``exclude`` pixels of zero (per axis) are ignored; the image
    is whitened first so the margin reflects texture rather than brightness.
    """
    x = img - img.mean()
    f = np.fft.fft2(x)
    ac = np.real(np.fft.ifft2(f * np.conj(f) / (np.abs(f) + 1e-9 * np.abs(f).max())))
    ac = ac / ac[0, 0]
    n0, n1 = ac.shape
    r = np.minimum(np.arange(n0), n0 - np.arange(n0))
    c = np.minimum(np.arange(n1), n1 - np.arange(n1))
    near = (r[:, None] <= exclude) & (c[None, :] <= exclude)
    return 1.0 - ac[~near].max()


def gen_base_image(seed, size=128, min_margin=0.05, max_tries=20):
    """Random textured image in [0, 1]: value noise under 10-40 shapes.

    Candidates whose autocorrelation margin falls below ``min_margin`` are
    rejected and redrawn from derived seeds.
    """
    if size < 8 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 8, got {size}")
    for attempt in range(max_tries):
        img = _raw_base(seed if attempt == 0 else (seed, attempt), size)
        if autocorrelation_margin(img) > min_margin:
            if attempt:
                log.info("base image seed %s: %d rejected candidate(s)", seed, attempt)
            return img
    log.warning("base image seed %s: no candidate passed the margin check", seed)
    return img


# -- restyling ------------------------------------------------------------------

def restyle(img, rng, kind=None):
    """Apply one modality change; returns (image, style name)."""
    if kind is None:
        kind = STYLES[rng.integers(len(STYLES))]
    if kind == "invert":
        out = 1.0 - img
    elif kind == "gamma":
        out = np.clip(img, 0, 1) ** rng.uniform(0.3, 3.0)
    elif kind == "edges":
        g = np.hypot(sobel(img, 0), sobel(img, 1))
        out = g / (g.max() + 1e-12)
    elif kind == "posterize":
        # four equal bands; the level order is reversed for half the pairs
        levels = np.arange(4) / 3.0
        if rng.random() < 0.5:
            levels = levels[::-1]
        out = levels[np.floor(np.clip(img, 0, 1) * 3.999).astype(int)]
    elif kind == "bias":
        n = img.shape[0]
        field_ = zoom(rng.random((3, 3)), n / 3, order=1)[:n, :n]
        a = rng.uniform(*BIAS_WEIGHT)
        out = (1.0 - a) * img + a * field_
    else:
        raise ValueError(f"unknown style {kind!r}")
    return out, kind


def _add_obstacles(img, rng):
    n = img.shape[0]
    out = img.copy()
    mask = np.zeros((n, n), dtype=bool)
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(rng.integers(1, 6)):
        area = rng.uniform(0.01, 0.08) * n * n
        aspect = rng.uniform(0.5, 2.0)
        rx = math.sqrt(area / math.pi * aspect)
        ry = area / (math.pi * rx)
        cx, cy = rng.uniform(0, n, 2)
        blob = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        out[blob] = rng.uniform(0, 1)
        mask |= blob
    return out, mask


def make_pair(seed, tag="homogeneous", ranges: PoseRanges = None, size=128, pose=None) -> SamplePair:
    """Generate one pair; ``seed`` determines image, pose, style and noise."""
    if tag not in TAGS:
        raise ValueError(f"unknown set tag {tag!r}; expected one of {TAGS}")
    ranges = ranges or PoseRanges.for_size(size)
    ranges.validate(size)
    rng = np.random.default_rng([seed, TAGS.index(tag)])
    template = gen_base_image(seed, size)
    pose = pose or ranges.sample(rng)
    source = warp_sim2(template, pose).data
    pair = SamplePair(template, source, pose, tag, seed)
    if tag in ("heterogeneous", "dynamic"):
        pair.source, pair.style = restyle(source, rng)
        pair.template = np.clip(pair.template + rng.normal(0, 0.02, template.shape), 0, 1)
        pair.source = np.clip(pair.source + rng.normal(0, 0.02, source.shape), 0, 1)
    if tag == "dynamic":
        which = "template" if rng.random() < 0.5 else "source"
        img, mask = _add_obstacles(getattr(pair, which), rng)
        setattr(pair, which, img)
        pair.obstacle_mask, pair.obstacle_image = mask, which
    return pair


# -- persistence -----------------------------------------------------------------

def to_uint8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(path, img):
    Image.fromarray(to_uint8(img), mode="L").save(path, optimize=False)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_dataset(directory, pairs):
    """Write PNGs and ``manifest.csv``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, MANIFEST)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i, p in enumerate(pairs):
            t_name, s_name = f"{i:05d}_template.png", f"{i:05d}_source.png"
            save_png(os.path.join(directory, t_name), p.template)
            save_png(os.path.join(directory, s_name), p.source)
            w.writerow([t_name, s_name, repr(p.pose.tx), repr(p.pose.ty), repr(p.pose.theta),
                        repr(p.pose.s), p.tag, p.seed])
    return path


@dataclass
class Record:
    template: str
    source: str
    pose: PoseSim2
    tag: str
    seed: int

    def load(self):
        return load_png(self.template), load_png(self.source)


def read_manifest(directory):
    """Parse ``manifest.csv`` into records with absolute image paths."""
    path = os.path.join(directory, MANIFEST) if os.path.isdir(directory) else directory
    root = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError(f"{path}: header must be {','.join(COLUMNS)}")
    for i, row in enumerate(rows[1:]):
        try:
            if len(row) != len(COLUMNS):
                raise ValueError(f"expected {len(COLUMNS)} fields, got {len(row)}")
            t, s, tx, ty, th, sc, tag, seed = row
            pose = PoseSim2(float(sc), float(th), float(tx), float(ty))
            rec = Record(os.path.join(root, t), os.path.join(root, s), pose, tag, int(seed))
        except ValueError as exc:
            raise ValueError(f"{path}: record {i}: {exc}") from exc
        for img in (rec.template, rec.source):
            if not os.path.exists(img):
                raise FileNotFoundError(f"{path}: record {i}: missing image {img}")
        records.append(rec)
    return records


def read_dataset(directory):
    """Load every pair as (template, source, pose, tag, seed) with images in [0, 1]."""
    out = []
    for i, rec in enumerate(read_manifest(directory)):
        try:
            t, s = rec.load()
        except OSError as exc:
            raise ValueError(f"record {i}: cannot read image: {exc}") from exc
        out.append(SamplePair(t, s, rec.pose, rec.tag, rec.seed))
    return out


def generate(seeds, tag, size=128, ranges=None):
    return [make_pair(int(s), tag, ranges, size) for s in seeds]
