"""Instance extraction from head probabilities and mask rendering."""

import numpy as np
import pytest

from sortscan import instances as inst
from sortscan.instances import BG, CONTOUR, FG, InstanceMask


def probs_from_semantic_codes(codes: np.ndarray) -> np.ndarray:
    out = np.zeros((3, *codes.shape))
    for ch in (FG, BG, CONTOUR):
        out[ch] = codes == ch
    return out


def uniform_class_probs(shape, num_classes=2, cls=1):
    out = np.zeros((num_classes + 1, *shape))
    out[cls] = 1.0
    return out


class TestExtractInstances:
    def test_all_background_gives_empty_mask(self):
        codes = np.full((8, 8), BG)
        mask = inst.extract_instances(probs_from_semantic_codes(codes),
                                      uniform_class_probs((8, 8)))
        assert mask.num_instances == 0
        assert not mask.labels.any()

    def test_two_separated_blobs_give_two_instances(self):
        codes = np.full((8, 8), BG)
        codes[1:3, 1:3] = FG
        codes[5:7, 5:7] = FG
        mask = inst.extract_instances(probs_from_semantic_codes(codes),
                                      uniform_class_probs((8, 8)))
        assert mask.num_instances == 2
        mask.validate()

    def test_contour_bisected_blob_splits_in_two(self):
        codes = np.full((9, 9), BG)
        codes[2:7, 2:7] = FG
        codes[4, 2:7] = CONTOUR  # line through the middle
        mask = inst.extract_instances(probs_from_semantic_codes(codes),
                                      uniform_class_probs((9, 9)))
        assert mask.num_instances == 2
        # contour pixels rejoin their nearest seed: full blob covered
        assert (mask.labels > 0).sum() == 25

    def test_instance_class_majority_vote(self):
        codes = np.full((6, 6), BG)
        codes[1:4, 1:4] = FG
        cls_probs = np.zeros((3, 6, 6))
        cls_probs[1] = 0.2
        cls_probs[2] = 0.7  # class 2 wins everywhere
        mask = inst.extract_instances(probs_from_semantic_codes(codes), cls_probs)
        assert mask.classes[1] == 2

    def test_idempotent_on_rendered_output(self, rng):
        from sortscan import synth

        cfg = synth.SynthConfig(image_size=64, num_classes=2, num_images=2,
                                instances_min=4, instances_max=6,
                                prevalence=(0.5, 0.5), radius_min=4, radius_max=7,
                                seed=21)
        for s in synth.generate(cfg):
            gt = inst.InstanceMask(labels=s.instance_mask.copy(), classes={})
            sem = inst.render_semantic(gt)
            cls_probs = uniform_class_probs(s.instance_mask.shape)
            first = inst.extract_instances(sem, cls_probs)
            second = inst.extract_instances(inst.render_semantic(first), cls_probs)
            np.testing.assert_array_equal(first.labels, second.labels)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            inst.extract_instances(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))


class TestRenderSemantic:
    def test_one_hot_and_boundary(self):
        labels = np.zeros((6, 6), dtype=np.int32)
        labels[1:5, 1:5] = 1
        rendered = inst.render_semantic(InstanceMask(labels=labels, classes={1: 1}))
        np.testing.assert_array_equal(rendered.sum(axis=0), 1.0)
        assert rendered[CONTOUR, 1, 1] == 1  # corner touches background
        assert rendered[FG, 2, 2] == 1       # interior
        assert rendered[BG, 0, 0] == 1

    def test_semantic_target_codes(self):
        labels = np.zeros((6, 6), dtype=np.int32)
        labels[1:5, 1:5] = 1
        codes = inst.semantic_target(labels)
        assert codes[0, 0] == BG
        assert codes[1, 1] == CONTOUR
        assert codes[2, 2] == FG


class TestInstanceMaskIO:
    def test_png_sidecar_round_trip(self, tmp_path, rng):
        labels = np.zeros((8, 8), dtype=np.int32)
        labels[:3, :3] = 1
        labels[5:, 5:] = 2
        mask = InstanceMask(labels=labels, classes={1: 2, 2: 1})
        path = str(tmp_path / "m.png")
        inst.save_instance_mask(path, mask)
        back = inst.load_instance_mask(path)
        np.testing.assert_array_equal(back.labels, labels)
        assert back.classes == mask.classes

    def test_validate_catches_gaps_and_missing_classes(self):
        labels = np.zeros((4, 4), dtype=np.int32)
        labels[0, 0] = 2  # id 1 missing
        with pytest.raises(ValueError):
            InstanceMask(labels=labels, classes={2: 1}).validate()
        labels[0, 1] = 1
        with pytest.raises(ValueError):
            InstanceMask(labels=labels, classes={1: 1}).validate()
