import math
import os

import numpy as np
import pytest

from dpcreg.datasynth import (
    COLUMNS,
    MANIFEST,
    STYLES,
    _add_obstacles,
    PoseRanges,
    autocorrelation_margin,
    gen_base_image,
    generate,
    make_pair,
    read_dataset,
    read_manifest,
    restyle,
    to_uint8,
    write_dataset,
)
from dpcreg.estimator import PoseSim2, register


class TestBaseImage:
    def test_same_seed_same_image(self):
        np.testing.assert_array_equal(gen_base_image(4), gen_base_image(4))
        assert not np.array_equal(gen_base_image(4), gen_base_image(5))

    def test_range_and_shape(self):
        img = gen_base_image(0, 64)
        assert img.shape == (64, 64)
        assert img.min() == 0.0 and img.max() == 1.0

    def test_mean_intensity_over_seeds(self):
        means = np.array([gen_base_image(s).mean() for s in range(100)])
        assert np.all((means >= 0.2) & (means <= 0.8))

    def test_autocorrelation_margin_over_seeds(self):
        margins = np.array([autocorrelation_margin(gen_base_image(s)) for s in range(100)])
        assert np.mean(margins > 0.05) >= 0.95

    def test_periodic_image_has_no_margin(self):
        yy, xx = np.mgrid[0:64, 0:64]
        stripes = np.sin(2 * np.pi * xx / 16) + 0.0 * yy
        assert autocorrelation_margin(stripes) < 0.05

    @pytest.mark.parametrize("size", [0, 100, 4])
    def test_size_must_be_power_of_two(self, size):
        with pytest.raises(ValueError, match="power of two"):
            gen_base_image(0, size)


class TestPoseRanges:
    def test_defaults(self):
        r = PoseRanges()
        assert r.tx == (-50.0, 50.0) and r.ty == (-50.0, 50.0)
        assert r.theta == (0.0, math.pi) and r.scale == (0.8, 1.2)

    def test_for_size_scales_translation_only(self):
        r = PoseRanges.for_size(128)
        assert r.tx == (-25.0, 25.0) and r.scale == (0.8, 1.2)

    def test_samples_lie_in_range(self, rng):
        r = PoseRanges()
        for _ in range(200):
            p = r.sample(rng)
            assert -50 <= p.tx <= 50 and -50 <= p.ty <= 50
            assert 0 <= p.theta < math.pi and 0.8 <= p.s <= 1.2

    @pytest.mark.parametrize("ranges", [
        PoseRanges(tx=(-70.0, 70.0)),
        PoseRanges(scale=(0.0, 1.0)),
        PoseRanges(scale=(1.2, 0.8)),
        PoseRanges(theta=(0.0, 10.0)),
    ])
    def test_invalid_ranges_rejected(self, ranges):
        with pytest.raises(ValueError):
            make_pair(0, "homogeneous", ranges, size=128)


class TestMakePair:
    def test_deterministic(self):
        a, b = make_pair(12, "dynamic"), make_pair(12, "dynamic")
        np.testing.assert_array_equal(a.template, b.template)
        np.testing.assert_array_equal(a.source, b.source)
        assert a.pose == b.pose and a.style == b.style

    def test_identity_pose_gives_identical_images(self):
        p = make_pair(3, "homogeneous", pose=PoseSim2())
        np.testing.assert_array_equal(p.template, p.source)

    def test_unknown_tag(self):
        with pytest.raises(ValueError, match="unknown set tag"):
            make_pair(0, "noisy")

    @pytest.mark.parametrize("tag", ["heterogeneous", "dynamic"])
    def test_restyled_pairs_stay_in_unit_range(self, tag):
        for seed in range(10):
            p = make_pair(seed, tag)
            assert p.style in STYLES
            for img in (p.template, p.source):
                assert img.min() >= 0 and img.max() <= 1

    def test_dynamic_obstacles_in_one_image(self):
        for seed in range(10):
            p = make_pair(seed, "dynamic")
            assert 0 < p.obstacle_mask.mean() <= 5 * 0.08
            assert p.obstacle_image in ("template", "source")

    def test_obstacles_only_touch_masked_pixels(self, rng):
        img = gen_base_image(2, 64)
        out, mask = _add_obstacles(img, rng)
        np.testing.assert_array_equal(out[~mask], img[~mask])
        assert mask.any()
        # each blob is a single opaque intensity
        assert len(np.unique(out[mask])) <= 5

    @pytest.mark.parametrize("kind", STYLES)
    def test_each_style_is_deterministic(self, kind):
        img = gen_base_image(1, 64)
        a, _ = restyle(img, np.random.default_rng(0), kind)
        b, _ = restyle(img, np.random.default_rng(0), kind)
        np.testing.assert_array_equal(a, b)
        assert a.shape == img.shape

    @pytest.mark.xfail(strict=True, reason="baseline misses by > 5 px on 73 of 200 pairs: inverted and "
                       "reversed-posterize maps put the positive peak in a sidelobe within 3 px")
    def test_heterogeneous_baseline_fails_on_majority(self):
        fails = 0
        for seed in range(100000, 100200):
            p = make_pair(seed, "heterogeneous")
            e = register(p.template, p.source)
            fails += max(abs(e.pose.tx - p.pose.tx), abs(e.pose.ty - p.pose.ty)) > 5
        assert fails > 100


class TestPersistence:
    @pytest.fixture
    def pairs(self):
        return generate(range(10), "heterogeneous", size=64, ranges=PoseRanges.for_size(64))

    def test_write_layout(self, tmp_path, pairs):
        write_dataset(tmp_path, pairs)
        assert len(list(tmp_path.glob("*.png"))) == 20
        lines = (tmp_path / MANIFEST).read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(COLUMNS)
        assert len(lines) == 11

    def test_round_trip(self, tmp_path, pairs):
        write_dataset(tmp_path, pairs)
        back = read_dataset(tmp_path)
        for p, q in zip(pairs, back):
            assert p.pose.close_to(q.pose, 1e-9)
            assert (q.tag, q.seed) == (p.tag, p.seed)
            np.testing.assert_array_equal(to_uint8(p.template), to_uint8(q.template))
            assert np.max(np.abs(q.source - p.source)) <= 0.5 / 255 + 1e-12

    def test_rewrite_is_byte_identical(self, tmp_path, pairs):
        write_dataset(tmp_path / "a", pairs)
        write_dataset(tmp_path / "b", generate(range(10), "heterogeneous", 64, PoseRanges.for_size(64)))
        for name in sorted(os.listdir(tmp_path / "a")):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_image_names_record(self, tmp_path, pairs):
        write_dataset(tmp_path, pairs)
        os.remove(tmp_path / "00003_source.png")
        with pytest.raises(FileNotFoundError, match="record 3"):
            read_manifest(tmp_path)

    def test_corrupt_record_names_index(self, tmp_path, pairs):
        write_dataset(tmp_path, pairs)
        path = tmp_path / MANIFEST
        lines = path.read_text().splitlines()
        lines[2] = lines[2].replace(",", ";", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="record 1"):
            read_manifest(tmp_path)

    def test_bad_header(self, tmp_path):
        (tmp_path / MANIFEST).write_text("a,b\n")
        with pytest.raises(ValueError, match="header"):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)

    def test_quantization_barely_moves_baseline(self, tmp_path):
        pairs = generate(range(20), "homogeneous")
        write_dataset(tmp_path, pairs)
        for p, q in zip(pairs, read_dataset(tmp_path)):
            a, b = register(p.template, p.source).pose, register(q.template, q.source).pose
            assert abs(a.tx - b.tx) < 0.5 and abs(a.ty - b.ty) < 0.5
