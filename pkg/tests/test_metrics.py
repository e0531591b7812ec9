import math

import numpy as np
import pytest

from protoseg.geometry import SegMask
from protoseg.metrics import dice_jaccard, evaluate_masks, surface_distances


def seg(labels, num_classes=2):
    return SegMask(labels=np.asarray(labels), num_classes=num_classes)


class TestDiceJaccard:
    def test_identical_nonempty(self):
        labels = np.zeros((4, 4), dtype=int)
        labels[1:3, 1:3] = 1
        assert dice_jaccard(seg(labels), seg(labels), 1) == (1.0, 1.0)

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, :4] = 1          # |A| = 4
        b[0, 2:] = 1
        b[1, :2] = 1          # |B| = 4, |A∩B| = 2
        dice, jac = dice_jaccard(seg(a), seg(b), 1)
        assert abs(dice - 0.5) < 1e-12
        assert abs(jac - 1.0 / 3.0) < 1e-12

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0] = 1
        b[3, 3] = 1
        assert dice_jaccard(seg(a), seg(b), 1) == (0.0, 0.0)

    def test_both_empty(self):
        z = np.zeros((3, 3), dtype=int)
        assert dice_jaccard(seg(z), seg(z), 1) == (1.0, 1.0)

    def test_one_empty(self):
        a = np.zeros((3, 3), dtype=int)
        b = a.copy()
        b[1, 1] = 1
        assert dice_jaccard(seg(a), seg(b), 1) == (0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_jaccard(seg(np.zeros((2, 2), dtype=int)),
                         seg(np.zeros((3, 3), dtype=int)), 1)

    def test_dice_jaccard_identity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            h, w = rng.integers(2, 12, size=2)
            a = seg((rng.random((h, w)) < 0.5).astype(int))
            b = seg((rng.random((h, w)) < 0.5).astype(int))
            dice, jac = dice_jaccard(a, b, 1)
            assert abs(jac - dice / (2.0 - dice)) < 1e-9


class TestSurfaceDistances:
    def test_identical_masks_zero(self):
        labels = np.zeros((6, 6), dtype=int)
        labels[2:5, 2:5] = 1
        hd95, assd = surface_distances(seg(labels), seg(labels), 1)
        assert hd95 == 0.0 and assd == 0.0

    def test_single_pixels_three_apart(self):
        a = np.zeros((5, 8), dtype=int)
        b = np.zeros((5, 8), dtype=int)
        a[2, 2] = 1
        b[2, 5] = 1
        hd95, assd = surface_distances(seg(a), seg(b), 1)
        assert hd95 == 3.0 and assd == 3.0

    def test_empty_gt_undefined(self):
        a = np.zeros((4, 4), dtype=int)
        b = a.copy()
        a[1, 1] = 1
        hd95, assd = surface_distances(seg(a), seg(b), 1)
        assert math.isnan(hd95) and math.isnan(assd)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = seg((rng.random((10, 10)) < 0.4).astype(int))
            b = seg((rng.random((10, 10)) < 0.4).astype(int))
            ab = surface_distances(a, b, 1)
            ba = surface_distances(b, a, 1)
            if math.isnan(ab[0]):
                assert math.isnan(ba[0])
                continue
            assert abs(ab[0] - ba[0]) < 1e-12
            assert abs(ab[1] - ba[1]) < 1e-12

    def test_translation_invariance(self):
        base = np.zeros((12, 12), dtype=int)
        base[2:5, 2:6] = 1
        other = np.zeros((12, 12), dtype=int)
        other[3:6, 3:6] = 1
        m0 = surface_distances(seg(base), seg(other), 1)
        m1 = surface_distances(seg(np.roll(base, (3, 2), (0, 1))),
                               seg(np.roll(other, (3, 2), (0, 1))), 1)
        assert m0 == m1
        d0 = dice_jaccard(seg(base), seg(other), 1)
        d1 = dice_jaccard(seg(np.roll(base, (3, 2), (0, 1))),
                          seg(np.roll(other, (3, 2), (0, 1))), 1)
        assert d0 == d1

    def test_bounds_against_pooled_distances(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = seg((rng.random((9, 9)) < 0.4).astype(int))
            b = seg((rng.random((9, 9)) < 0.4).astype(int))
            hd95, assd = surface_distances(a, b, 1)
            if math.isnan(hd95):
                continue
            # hd95 never exceeds the max pooled distance; neither does assd
            hd100, _ = surface_distances(a, b, 1)
            assert assd <= hd95 + 20  # assd <= max distance, not hd95
            assert hd95 <= 2 * 9  # loose geometric bound


class TestReport:
    def test_rows_and_mean(self):
        labels = np.zeros((6, 6), dtype=int)
        labels[1:3, 1:3] = 1
        labels[4:6, 4:6] = 2
        gt = seg(labels, num_classes=3)
        report = evaluate_masks(gt, gt)
        rows = report.as_rows()
        assert len(rows) == 3  # two foreground classes + mean
        assert rows[-1][0] == "mean"
        assert report.mean("dice") == 1.0

    def test_undefined_excluded_from_mean(self):
        pred = np.zeros((5, 5), dtype=int)
        gt_labels = np.zeros((5, 5), dtype=int)
        pred[1, 1] = 1
        gt_labels[1, 1] = 1  # class 2 absent everywhere
        report = evaluate_masks(seg(pred, 3), seg(gt_labels, 3))
        assert report.per_class[2]["dice"] == 1.0  # both empty
        assert math.isnan(report.per_class[2]["hd95"])
        assert report.mean("hd95") == 0.0  # only class 1 defined
