"""
Tests for bag-level classification metrics
"""

import unittest

import numpy as np

from src.prdl.errors import MetricError, ShapeMismatchError
from src.prdl.metrics import (
    accuracy,
    classification_metrics,
    macro_f1,
    micro_auc,
    pairwise_auc,
)


class TestAuc(unittest.TestCase):
    """Test cases for pairwise and micro-averaged AUC"""

    def test_four_bag_example(self):
        """Test labels (1,1,0,0) with scores (0.9,0.4,0.6,0.1) give 0.75"""
        self.assertEqual(micro_auc([1, 1, 0, 0], [0.9, 0.4, 0.6, 0.1]), 0.75)

    def test_binary_pairwise_form(self):
        """Test the positive-vs-negative brute force on the same example"""
        self.assertEqual(pairwise_auc(np.array([0.9, 0.4]), np.array([0.6, 0.1])), 0.75)

    def test_constant_scores_give_one_half(self):
        """Test ties count half"""
        self.assertEqual(micro_auc([0, 1, 0, 1], [0.3, 0.3, 0.3, 0.3]), 0.5)

    def test_perfect_ranking(self):
        """Test a perfect multi-class ranking gives 1"""
        scores = np.eye(3)[[0, 1, 2, 1]] * 0.8 + 0.1
        self.assertEqual(micro_auc([0, 1, 2, 1], scores), 1.0)

    def test_micro_average_pools_every_cell(self):
        """Test micro AUC equals the pairwise AUC over all (bag, class) cells"""
        rng = np.random.default_rng(4)
        labels = np.array([0, 1, 2, 2, 1, 0, 1])
        scores = rng.random((7, 3))
        truth = np.eye(3, dtype=bool)[labels]
        expected = pairwise_auc(scores[truth], scores[~truth])
        self.assertAlmostEqual(micro_auc(labels, scores), expected)

    def test_single_class_split_rejected(self):
        """Test AUC is undefined with one class present"""
        with self.assertRaises(MetricError):
            micro_auc([1, 1, 1], [0.2, 0.5, 0.9])

    def test_label_beyond_score_columns_rejected(self):
        """Test labels must index score columns"""
        with self.assertRaises(ShapeMismatchError):
            micro_auc([0, 2], np.array([[0.5, 0.5], [0.1, 0.9]]))

    def test_empty_pairs_rejected(self):
        """Test pairwise AUC needs both groups"""
        with self.assertRaises(MetricError):
            pairwise_auc(np.array([0.5]), np.array([]))


class TestF1AndAccuracy(unittest.TestCase):
    """Test cases for macro-F1 and accuracy"""

    def test_perfect_predictions(self):
        """Test perfect predictions score 1"""
        self.assertEqual(macro_f1([0, 1, 1, 0], [0, 1, 1, 0], 2), 1.0)
        self.assertEqual(accuracy([0, 1, 1, 0], [0, 1, 1, 0]), 1.0)

    def test_hand_computed_macro_f1(self):
        """Test per-class F1 averaged without weights"""
        # class 0: tp=1 fp=1 fn=1 -> 0.5; class 1: tp=1 fp=1 fn=1 -> 0.5
        self.assertAlmostEqual(macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2), 0.5)

    def test_class_without_support_scores_zero(self):
        """Test zero division yields 0 for that class"""
        self.assertAlmostEqual(macro_f1([0, 0], [0, 0], 2), 0.5)

    def test_empty_accuracy_rejected(self):
        """Test accuracy on an empty split raises"""
        with self.assertRaises(MetricError):
            accuracy([], [])


class TestClassificationMetrics(unittest.TestCase):
    """Test cases for classification_metrics"""

    def test_perfect_two_class_split(self):
        """Test a perfect classifier scores 1 everywhere"""
        metrics = classification_metrics([1, 0, 1, 0], [0.9, 0.2, 0.7, 0.1])
        self.assertEqual(metrics.to_dict(), {"auc": 1.0, "f1": 1.0, "accuracy": 1.0, "count": 4})

    def test_all_metrics_in_unit_interval(self):
        """Test random scores give metrics in [0, 1]"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, size=9)])
            metrics = classification_metrics(labels, rng.random((12, 3)))
            for value in (metrics.auc, metrics.f1, metrics.accuracy):
                self.assertGreaterEqual(value, 0.0)
                self.assertLessEqual(value, 1.0)

    def test_score_rows_must_match_labels(self):
        """Test mismatched score rows raise"""
        with self.assertRaises(ShapeMismatchError):
            classification_metrics([0, 1], np.ones((3, 2)))


if __name__ == "__main__":
    unittest.main()
