import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossview.metrics import ConfusionMatrix, UndefinedMetricError, accuracy, fwiou, miou


def toy_matrix():
    cm = ConfusionMatrix(2)
    cm.accumulate(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    return cm


class TestAccumulate:
    def test_diagonal(self):
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 1]), np.array([0, 1]))
        np.testing.assert_array_equal(cm.counts, [[1, 0], [0, 1]])

    def test_all_ignored_unchanged(self):
        cm = ConfusionMatrix(2, ignore_id=255)
        cm.accumulate(np.array([0, 1]), np.array([255, 255]))
        assert cm.total == 0

    def test_hand_tally(self):
        np.testing.assert_array_equal(toy_matrix().counts, [[1, 0], [1, 2]])

    def test_out_of_range_reports_index(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError, match="index 1"):
            cm.accumulate(np.array([0, 5]), np.array([0, 1]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([0]), np.array([0, 1]))

    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=30))
    def test_merge_equals_concatenated_accumulation(self, pairs):
        half = len(pairs) // 2
        pred = np.array([p for p, _ in pairs], dtype=np.int64)
        gt = np.array([g for _, g in pairs], dtype=np.int64)
        merged = ConfusionMatrix(3)
        merged.accumulate(pred[:half], gt[:half])
        other = ConfusionMatrix(3)
        other.accumulate(pred[half:], gt[half:])
        merged.merge(other)
        whole = ConfusionMatrix(3)
        if len(pairs):
            whole.accumulate(pred, gt)
        np.testing.assert_array_equal(merged.counts, whole.counts)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(0)
        pred = rng.integers(0, 4, 100)
        gt = rng.integers(0, 4, 100)
        perm = rng.permutation(100)
        a = ConfusionMatrix(4).accumulate(pred, gt)
        b = ConfusionMatrix(4).accumulate(pred[perm], gt[perm])
        np.testing.assert_array_equal(a.counts, b.counts)


class TestMiou:
    def test_perfect(self):
        cm = ConfusionMatrix(3)
        cm.accumulate(np.array([0, 1, 2]), np.array([0, 1, 2]))
        per_class, mean = miou(cm)
        np.testing.assert_array_equal(per_class, [1.0, 1.0, 1.0])
        assert mean == 1.0

    def test_hand_arithmetic(self):
        per_class, mean = miou(toy_matrix())
        np.testing.assert_allclose(per_class, [0.5, 2.0 / 3.0])
        assert mean == pytest.approx(0.5833333333333333, abs=1e-9)

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(3)
        cm.accumulate(np.array([0, 0]), np.array([0, 0]))
        per_class, mean = miou(cm)
        assert per_class[0] == 1.0
        assert np.isnan(per_class[1]) and np.isnan(per_class[2])
        assert mean == 1.0

    def test_empty_raises(self):
        with pytest.raises(UndefinedMetricError):
            miou(ConfusionMatrix(2))


class TestAccuracyFwiou:
    def test_perfect(self):
        cm = ConfusionMatrix(2)
        cm.accumulate(np.array([0, 1]), np.array([0, 1]))
        assert accuracy(cm) == 1.0
        assert fwiou(cm) == 1.0

    def test_hand_arithmetic(self):
        cm = toy_matrix()
        assert accuracy(cm) == 0.75
        assert fwiou(cm) == pytest.approx(0.625, abs=1e-12)

    def test_empty_raises(self):
        with pytest.raises(UndefinedMetricError):
            accuracy(ConfusionMatrix(2))
        with pytest.raises(UndefinedMetricError):
            fwiou(ConfusionMatrix(2))

    def test_bounds_and_diagonal_equivalence(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(1, 50))
            pred = rng.integers(0, 3, n)
            gt = rng.integers(0, 3, n)
            cm = ConfusionMatrix(3).accumulate(pred, gt)
            _, m = miou(cm)
            a, f = accuracy(cm), fwiou(cm)
            assert 0.0 <= m <= 1.0 and 0.0 <= a <= 1.0 and 0.0 <= f <= 1.0
            off_diagonal = cm.counts.sum() - np.trace(cm.counts)
            all_one = m == 1.0 and a == 1.0 and f == 1.0
            assert all_one == (off_diagonal == 0)
