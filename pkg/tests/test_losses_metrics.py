"""
Tests for the training losses and the DSC / NSD metrics.
"""

import math

import numpy as np
import pytest

from dual_branch_sam.exceptions import DimensionError, FormatError
from dual_branch_sam.losses import DICE_EPS, bce_loss, combined_loss, dice_loss
from dual_branch_sam.metrics import (
    MetricsReport,
    dsc_metric,
    nsd_metric,
    sample_group,
    surface_extract,
    surface_mask,
)
from dual_branch_sam.tensor import Tensor, finite_diff_check


# ============================================================================
# Losses
# ============================================================================


class TestDiceLoss:
    def test_confident_correct_prediction(self):
        target = np.ones((1, 1, 4, 4))
        assert dice_loss(Tensor(np.full((1, 1, 4, 4), 40.0)), target).item() == pytest.approx(0.0, abs=1e-6)

    def test_half_probability_on_full_target(self):
        n = 16
        loss = dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 1, 4, 4))).item()
        assert loss == pytest.approx(1.0 - (n + DICE_EPS) / (1.5 * n + DICE_EPS), rel=1e-12)
        assert loss == pytest.approx(1.0 / 3.0, abs=1e-6)

    def test_empty_target_and_empty_prediction(self):
        loss = dice_loss(Tensor(np.full((1, 1, 3, 3), -40.0)), np.zeros((1, 1, 3, 3))).item()
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(2, 1, 5, 5)))
        target = (rng.uniform(size=(2, 1, 5, 5)) < 0.5).astype(np.float64)
        assert finite_diff_check(lambda t: dice_loss(t, target), logits) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)))


class TestBceLoss:
    def test_zero_logits(self, rng):
        target = (rng.uniform(size=(2, 1, 4, 4)) < 0.5).astype(np.float64)
        assert bce_loss(Tensor(np.zeros((2, 1, 4, 4))), target).item() == pytest.approx(math.log(2.0), rel=1e-14)

    @pytest.mark.parametrize("z", [40.0, 800.0])
    def test_large_logits_stay_finite(self, z):
        ones = np.ones((1, 1, 2, 2))
        assert bce_loss(Tensor(np.full((1, 1, 2, 2), z)), ones).item() == pytest.approx(0.0, abs=1e-12)
        wrong = bce_loss(Tensor(np.full((1, 1, 2, 2), -z)), ones).item()
        assert math.isfinite(wrong)
        assert wrong == pytest.approx(z, rel=1e-12)

    def test_gradient(self, rng):
        logits = Tensor(rng.normal(size=(2, 1, 5, 5)) * 3)
        target = (rng.uniform(size=(2, 1, 5, 5)) < 0.5).astype(np.float64)
        assert finite_diff_check(lambda t: bce_loss(t, target), logits) < 1e-5

    def test_combined_is_sum(self, rng):
        logits = Tensor(rng.normal(size=(1, 1, 4, 4)))
        target = (rng.uniform(size=(1, 1, 4, 4)) < 0.5).astype(np.float64)
        expected = bce_loss(logits, target).item() + dice_loss(logits, target).item()
        assert combined_loss(logits, target).item() == pytest.approx(expected, rel=1e-14)


# ============================================================================
# Metrics
# ============================================================================


def _surface_oracle(mask):
    height, width = mask.shape
    points = []
    for i in range(height):
        for j in range(width):
            if not mask[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < height and 0 <= jj < width) or not mask[ii, jj]:
                    points.append((i, j))
                    break
    return np.array(points, dtype=np.int64).reshape(-1, 2)


def _nsd_oracle(pred, gt, tolerance):
    sp, sg = _surface_oracle(pred), _surface_oracle(gt)
    if len(sp) == 0 and len(sg) == 0:
        return 1.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(axis=-1))
    close = int((d.min(axis=1) <= tolerance).sum()) + int((d.min(axis=0) <= tolerance).sum())
    return close / (len(sp) + len(sg))


def _dsc_oracle(pred, gt):
    both = total = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        both += int(p and g)
        total += int(p) + int(g)
    return 1.0 if total == 0 else 2.0 * both / total


def _random_pairs(count, seed=0):
    """Mask pairs of random extent up to 16x16 and random foreground density."""
    gen = np.random.default_rng(seed)
    for _ in range(count):
        shape = tuple(gen.integers(1, 17, size=2))
        density = gen.uniform(0.05, 0.95)
        yield gen.uniform(size=shape) < density, gen.uniform(size=shape) < density


def _square(size, top, left, side):
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + side, left : left + side] = True
    return mask


class TestDsc:
    def test_half_overlap(self):
        pred = np.zeros((2, 4), bool)
        gt = np.zeros((2, 4), bool)
        pred[:, :2] = True
        gt[:, 1:3] = True
        assert dsc_metric(pred, gt) == 0.5

    def test_empty_masks(self):
        empty = np.zeros((3, 3), bool)
        assert dsc_metric(empty, empty) == 1.0
        assert dsc_metric(empty, ~empty) == 0.0

    def test_identical(self, rng):
        mask = rng.uniform(size=(8, 8)) < 0.3
        assert dsc_metric(mask, mask) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dsc_metric(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_matches_oracle(self):
        for pred, gt in _random_pairs(100, seed=1):
            assert dsc_metric(pred, gt) == _dsc_oracle(pred, gt)

    @pytest.mark.slow
    def test_matches_oracle_on_many_pairs(self):
        for pred, gt in _random_pairs(1000, seed=2):
            assert dsc_metric(pred, gt) == _dsc_oracle(pred, gt)


class TestSurface:
    def test_three_by_three_square(self):
        mask = _square(5, 1, 1, 3)
        assert surface_mask(mask).sum() == 8
        assert not surface_mask(mask)[2, 2]

    def test_border_pixels_are_surface(self):
        assert surface_mask(np.ones((3, 3), bool)).sum() == 8

    def test_extract_row_major(self):
        np.testing.assert_array_equal(surface_extract(_square(4, 1, 1, 2)), [[1, 1], [1, 2], [2, 1], [2, 2]])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, seed):
        mask = np.random.default_rng(seed).uniform(size=(9, 11)) < 0.5
        np.testing.assert_array_equal(surface_extract(mask), _surface_oracle(mask))


class TestNsd:
    def test_identical_masks(self):
        mask = _square(8, 2, 2, 4)
        assert nsd_metric(mask, mask, 0.0) == 1.0

    def test_one_pixel_shift_needs_unit_tolerance(self):
        pred, gt = _square(10, 2, 2, 4), _square(10, 2, 3, 4)
        assert nsd_metric(pred, gt, 1.0) == 1.0
        assert nsd_metric(pred, gt, 0.5) < 1.0

    def test_empty_masks(self):
        empty = np.zeros((4, 4), bool)
        assert nsd_metric(empty, empty) == 1.0
        assert nsd_metric(empty, _square(4, 1, 1, 2)) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("tolerance", [0.0, 1.0, 1.5, 2.0])
    def test_matches_oracle(self, seed, tolerance):
        gen = np.random.default_rng(seed)
        pred = gen.uniform(size=(10, 12)) < 0.4
        gt = gen.uniform(size=(10, 12)) < 0.4
        assert nsd_metric(pred, gt, tolerance) == _nsd_oracle(pred, gt, tolerance)

    @pytest.mark.parametrize(("tolerance", "expected"), [(1.0, 0.0), (1.9, 0.0), (2.0, 1.0), (3.0, 1.0)])
    def test_two_single_pixels(self, tolerance, expected):
        gt = np.zeros((3, 3), bool)
        pred = np.zeros((3, 3), bool)
        gt[0, 0] = True
        pred[0, 2] = True
        assert nsd_metric(pred, gt, tolerance) == expected

    def test_symmetric(self):
        for pred, gt in _random_pairs(100, seed=3):
            assert nsd_metric(pred, gt, 1.0) == nsd_metric(gt, pred, 1.0)

    def test_monotone_in_tolerance(self):
        tolerances = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 25.0]
        for pred, gt in _random_pairs(100, seed=4):
            scores = [nsd_metric(pred, gt, t) for t in tolerances]
            assert all(a <= b for a, b in zip(scores, scores[1:]))
            # wider than any 16x16 diagonal
            assert scores[-1] == (0.0 if surface_mask(pred).any() != surface_mask(gt).any() else 1.0)

    @pytest.mark.slow
    def test_matches_oracle_on_many_pairs(self):
        gen = np.random.default_rng(5)
        for pred, gt in _random_pairs(1000, seed=6):
            tolerance = float(gen.choice([0.0, 1.0, 1.5, 2.0, 3.0]))
            assert nsd_metric(pred, gt, tolerance) == _nsd_oracle(pred, gt, tolerance)


class TestMetricsReport:
    def test_means_and_groups(self):
        report = MetricsReport()
        report.add("ellipse_0", 1.0, 0.5)
        report.add("ring_1", 0.5, 1.0)
        report.add("ellipse_2", 0.0, 0.0)
        assert report.mean_dsc == pytest.approx(0.5)
        assert report.group_means() == {"ellipse": (2, 0.5, 0.25), "ring": (1, 0.5, 1.0)}

    def test_sample_group(self):
        assert sample_group("liver_ct_0007") == "liver_ct"
        assert sample_group("plain") == "plain"

    def test_csv_round_trip(self, tmp_path, rng):
        report = MetricsReport()
        for i in range(5):
            report.add(f"s_{i}", rng.uniform(), rng.uniform())
        path = tmp_path / "metrics.csv"
        report.write_csv(path)
        loaded, (dsc, nsd) = MetricsReport.read_csv(path)
        assert loaded == report
        assert (dsc, nsd) == (report.mean_dsc, report.mean_nsd)
        assert dsc == pytest.approx(np.mean([s.dsc for s in loaded.per_sample]), rel=1e-15)

    def test_groups_csv(self, tmp_path):
        report = MetricsReport()
        report.add("a_0", 1.0, 1.0)
        report.add("b_0", 0.0, 0.5)
        path = tmp_path / "groups.csv"
        report.write_groups_csv(path)
        assert path.read_text().splitlines() == ["group,count,dsc,nsd", "a,1,1.0,1.0", "b,1,0.0,0.5"]

    def test_malformed_report(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,dsc,nsd\nx,0.5\n")
        with pytest.raises(FormatError):
            MetricsReport.read_csv(path)
