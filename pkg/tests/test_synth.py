"""Synthetic dataset generator: determinism, prevalence, disk round-trip."""

import numpy as np
import pytest

from sortscan import synth
from sortscan.prompt import generate_labels_reference


def small_cfg(**kw):
    base = dict(image_size=64, num_classes=2, num_images=3, instances_min=3,
                instances_max=5, prevalence=(0.8, 0.2), radius_min=4,
                radius_max=8, seed=5)
    base.update(kw)
    return synth.SynthConfig(**base)


class TestGenerate:
    def test_single_class_prevalence(self):
        cfg = small_cfg(num_classes=1, prevalence=(1.0,))
        for s in synth.generate(cfg):
            present = np.unique(s.class_mask)
            assert set(present) <= {0, 1}

    def test_same_seed_bit_identical(self):
        a = synth.generate(small_cfg())
        b = synth.generate(small_cfg())
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.instance_mask, sb.instance_mask)
            np.testing.assert_array_equal(sa.class_mask, sb.class_mask)

    def test_rare_class_count_within_3_sigma(self):
        cfg = small_cfg(image_size=96, num_images=60, instances_min=8, instances_max=8,
                        prevalence=(0.95, 0.05), seed=11)
        samples = synth.generate(cfg)
        draws = rare = 0
        for s in samples:
            for inst in np.unique(s.instance_mask):
                if inst > 0:
                    draws += 1
                    cls = s.class_mask[s.instance_mask == inst][0]
                    rare += int(cls == 2)
        p = 0.05
        sigma = np.sqrt(draws * p * (1 - p))
        assert abs(rare - draws * p) <= 3 * sigma

    def test_masks_consistent(self):
        for s in synth.generate(small_cfg()):
            np.testing.assert_array_equal(s.instance_mask > 0, s.class_mask > 0)

    def test_instances_do_not_overlap(self):
        # every nonzero pixel belongs to exactly one id by construction;
        # check ids are contiguous and the margin keeps instances apart
        from scipy.ndimage import binary_dilation

        for s in synth.generate(small_cfg()):
            ids = np.unique(s.instance_mask)
            ids = ids[ids > 0]
            np.testing.assert_array_equal(ids, np.arange(1, len(ids) + 1))
            for k in ids:
                blob = s.instance_mask == k
                others = (s.instance_mask > 0) & ~blob
                assert not (binary_dilation(blob) & others).any()

    def test_label_round_trip_against_oracle(self):
        cfg = small_cfg(image_size=64)
        for s in synth.generate(cfg):
            fast = s.block_labels([16], cfg.num_classes)[0].grid
            slow = generate_labels_reference(s.class_mask, 16, cfg.num_classes)
            np.testing.assert_array_equal(fast, slow)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            synth.generate(small_cfg(prevalence=(0.6, 0.6)))
        with pytest.raises(ValueError):
            synth.generate(small_cfg(num_classes=3))
        with pytest.raises(ValueError):
            synth.generate(small_cfg(radius_min=1))


class TestSplit:
    def test_half_split_of_ten(self):
        cfg = small_cfg(num_images=10)
        samples = synth.generate(cfg)
        train, test = synth.split(samples, 0.5, seed=3)
        assert len(train) == 5 and len(test) == 5

    def test_union_exhaustive_intersection_empty(self):
        samples = synth.generate(small_cfg(num_images=7))
        train, test = synth.split(samples, 0.6, seed=3)
        got = {id(s) for s in train} | {id(s) for s in test}
        assert got == {id(s) for s in samples}
        assert not ({id(s) for s in train} & {id(s) for s in test})

    def test_same_seed_same_split(self):
        samples = synth.generate(small_cfg(num_images=6))
        a = synth.split(samples, 0.5, seed=9)
        b = synth.split(samples, 0.5, seed=9)
        assert [id(s) for s in a[0]] == [id(s) for s in b[0]]

    def test_degenerate_fractions_rejected(self):
        samples = synth.generate(small_cfg(num_images=3))
        with pytest.raises(ValueError):
            synth.split(samples, 0.0, seed=0)
        with pytest.raises(ValueError):
            synth.split(samples, 0.05, seed=0)


class TestDiskRoundTrip:
    def test_save_load_preserves_masks(self, tmp_path):
        cfg = small_cfg()
        samples = synth.generate(cfg)
        synth.save_dataset(str(tmp_path / "ds"), samples, cfg, meta={"purpose": "test"})
        loaded, meta = synth.load_dataset(str(tmp_path / "ds"))
        assert meta["purpose"] == "test"
        assert len(loaded) == len(samples)
        for a, b in zip(samples, loaded):
            np.testing.assert_array_equal(a.instance_mask, b.instance_mask)
            np.testing.assert_array_equal(a.class_mask, b.class_mask)
            assert np.max(np.abs(a.image - b.image)) <= 1 / 255 + 1e-6

    def test_text_mask_round_trip(self, tmp_path):
        mask = np.random.default_rng(0).integers(0, 4, (16, 16))
        path = str(tmp_path / "mask.txt")
        synth.save_class_mask_text(path, mask)
        np.testing.assert_array_equal(synth.load_class_mask_text(path), mask)
