"""Supervised augmentation levels and Barlow Twins views."""

import numpy as np
import pytest

from hmtlpose.augment import AugmentConfig, BTViewConfig, augment, bt_view, bt_view_pair, cutout
from hmtlpose.errors import InvalidInputError

SMALL = np.random.default_rng(9).integers(0, 256, (32, 32, 3), dtype=np.uint8)


class TestAugment:
    def test_zero_strength_is_identity(self, image, rng):
        cfg = AugmentConfig(level=1, zoom_range=(1.0, 1.0), contrast_range=(1.0, 1.0))
        assert np.array_equal(augment(image, cfg, rng), image)

    @pytest.mark.parametrize("level", [1, 2])
    def test_deterministic_and_shape(self, image, level):
        cfg = AugmentConfig(level=level)
        a = augment(image, cfg, np.random.default_rng(3))
        b = augment(image, cfg, np.random.default_rng(3))
        assert a.shape == image.shape and a.dtype == np.uint8
        assert np.array_equal(a, b)

    def test_level1_has_no_level2_stages(self):
        rng = np.random.default_rng(0)
        cfg = AugmentConfig(level=1)
        for _ in range(500):
            trace = []
            augment(SMALL, cfg, rng, trace)
            assert not {"blur", "downscale", "cutout"} & set(trace)

    def test_cutout_frequency(self):
        rng = np.random.default_rng(0)
        cfg = AugmentConfig(level=2)
        hits = 0
        for _ in range(10_000):
            trace = []
            augment(SMALL, cfg, rng, trace)
            hits += "cutout" in trace
        assert abs(hits / 10_000 - cfg.p_cutout) <= 0.02

    def test_bad_level(self):
        with pytest.raises(InvalidInputError):
            AugmentConfig(level=3)

    def test_cutout_fills_with_channel_mean(self, rng):
        img = np.zeros((20, 20, 3), np.uint8)
        img[:10] = (100, 0, 50)
        img[10:] = (200, 0, 150)
        out = cutout(img, 0.5, rng)
        changed = (out != img).any(-1)
        assert changed.sum() > 0
        assert (out[changed] == (150, 0, 100)).all()


class TestBTViews:
    def test_degenerate_config_is_quarter_turn(self, image, rng):
        cfg = BTViewConfig(
            output_size=224, p_color_jitter=0, p_grayscale=0, p_blur=0, p_resize=0,
            crop_scale=(1.0, 1.0), noise_sigma=(0.0, 0.0), cutout_range=(0.0, 0.0),
        )
        turns = [np.rot90(image, k) for k in range(4)]
        for _ in range(8):
            a, b = bt_view_pair(image, cfg, rng)
            assert any(np.array_equal(a, t) for t in turns)
            assert any(np.array_equal(b, t) for t in turns)

    def test_deterministic(self, image):
        cfg = BTViewConfig(output_size=64)
        a = bt_view_pair(image, cfg, np.random.default_rng(2))
        b = bt_view_pair(image, cfg, np.random.default_rng(2))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert a[0].shape == (64, 64, 3)

    def test_stage_frequencies(self):
        rng = np.random.default_rng(0)
        cfg = BTViewConfig(output_size=16)
        n = 10_000
        counts = {"color_jitter": 0, "grayscale": 0, "blur": 0, "resize": 0}
        for _ in range(n):
            trace = []
            bt_view(SMALL, cfg, rng, trace)
            for k in counts:
                counts[k] += k in trace
        assert abs(counts["color_jitter"] / n - 0.8) <= 0.02
        assert abs(counts["grayscale"] / n - 0.3) <= 0.02
        # one candidate picked with probability 1/2, then applied with 0.2
        assert abs(counts["blur"] / n - 0.1) <= 0.02
        assert abs(counts["resize"] / n - 0.1) <= 0.02

    def test_order(self):
        rng = np.random.default_rng(1)
        order = ["rotate90", "crop", "color_jitter", "grayscale", "noise", "blur", "resize", "puzzle", "cutout"]
        cfg = BTViewConfig(output_size=33, puzzling_variant=True)
        for _ in range(200):
            trace = []
            bt_view(SMALL, cfg, rng, trace)
            assert trace == sorted(trace, key=order.index)
            assert trace[-2:] == ["puzzle", "cutout"]
            assert not ("blur" in trace and "resize" in trace)

    def test_declared_stages(self):
        assert BTViewConfig().stages()[-1] == "cutout"
        stages = BTViewConfig(puzzling_variant=True).stages()
        assert stages.index("puzzle3x3") == stages.index("cutout") - 1

    def test_bad_probability(self):
        with pytest.raises(InvalidInputError):
            BTViewConfig(p_grayscale=1.5)
