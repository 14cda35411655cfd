"""
Tests for the attention-MIL bench
"""

import tempfile
import unittest
from collections import OrderedDict
from pathlib import Path

import numpy as np

from src.prdl import autodiff as ad
from src.prdl.config import MilConfig, StoreConfig
from src.prdl.errors import (
    CheckpointFormatError,
    DomainError,
    MetricError,
    MissingLabelError,
    ShapeMismatchError,
)
from src.prdl.mil import (
    BagFeeder,
    MilModel,
    attention_pool,
    baseline_augment,
    compare_augmentations,
    evaluate,
    load_mil_model,
    save_mil_model,
    train_mil,
)
from src.prdl.models.bag import BagRepresentations
from src.prdl.models.prompt import NUM_OPERATORS
from src.prdl.store import BagDistributions, PrsStore, mean_bag, sample_bag
from src.prdl.utils.seeding import derive_rng
from src.prdl.utils.blobs import write_blob_file


def separable_store(seed: int = 0, dim: int = 4):
    """Class-1 bags hold a few patches shifted along the first axis."""
    rng = np.random.default_rng(seed)
    mask = rng.uniform(0.1, 0.9, size=(NUM_OPERATORS, dim))
    bags = OrderedDict()
    splits = {"train": [], "val": [], "test": []}
    plan = [("train", 12), ("val", 4), ("test", 6)]
    index = 0
    for split, count in plan:
        for j in range(count):
            label = j % 2
            mu = rng.normal(0.0, 0.3, size=(6, dim))
            if label:
                mu[:3, 0] += 3.0
            bag_id = f"bag_{index:04d}"
            bags[bag_id] = BagDistributions(bag_id, label, mu, np.full((6, dim), 0.5))
            splits[split].append(bag_id)
            index += 1
    return PrsStore(mask, bags), splits


class TestAttentionPool(unittest.TestCase):
    """Test cases for attention pooling"""

    def setUp(self):
        """Set up test fixtures"""
        self.model = MilModel.build(4, 5, 3, np.random.default_rng(0))
        self.bag = np.random.default_rng(1).normal(size=(7, 4))

    def test_output_shapes(self):
        """Test logits (C,) and weights (n,) summing to one"""
        logits, weights = attention_pool(self.model, self.bag)
        self.assertEqual(logits.shape, (3,))
        self.assertEqual(weights.shape, (7,))
        self.assertAlmostEqual(float(weights.data.sum()), 1.0, places=12)

    def test_permutation_invariance(self):
        """Test shuffling patches leaves the logits unchanged"""
        logits, _ = attention_pool(self.model, self.bag)
        permuted, _ = attention_pool(self.model, self.bag[np.random.default_rng(2).permutation(7)])
        np.testing.assert_allclose(permuted.data, logits.data, rtol=0, atol=1e-12)

    def test_duplication_invariance(self):
        """Test duplicating every patch leaves the logits unchanged"""
        logits, _ = attention_pool(self.model, self.bag)
        doubled, _ = attention_pool(self.model, np.concatenate([self.bag, self.bag]))
        np.testing.assert_allclose(doubled.data, logits.data, rtol=0, atol=1e-9)

    def test_single_patch_bag(self):
        """Test a one-patch bag classifies that patch directly"""
        patch = self.bag[:1]
        logits, weights = attention_pool(self.model, patch)
        np.testing.assert_allclose(weights.data, [1.0])
        np.testing.assert_allclose(logits.data, patch[0] @ self.model.weight.data + self.model.bias.data)

    def test_empty_bag_rejected(self):
        """Test bags without patches raise"""
        with self.assertRaises(ShapeMismatchError):
            attention_pool(self.model, np.zeros((0, 4)))

    def test_wrong_dimension_rejected(self):
        """Test patches of the wrong width raise"""
        with self.assertRaises(ShapeMismatchError):
            attention_pool(self.model, np.zeros((3, 5)))

    def test_accepts_bag_representations(self):
        """Test BagRepresentations inputs pool like raw arrays"""
        logits, _ = attention_pool(self.model, BagRepresentations("b", self.bag))
        expected, _ = attention_pool(self.model, self.bag)
        np.testing.assert_array_equal(logits.data, expected.data)

    def test_gradients_reach_every_parameter(self):
        """Test all four parameter groups receive gradients"""
        _, grads = ad.evaluate_with_gradients(
            lambda: attention_pool(self.model, self.bag)[0].sum(), self.model.named_parameters()
        )
        for name in ("V", "w", "W"):
            self.assertTrue(np.any(grads[name] != 0), name)
        np.testing.assert_allclose(grads["b"], np.ones(3))


class TestBaselineAugment(unittest.TestCase):
    """Test cases for the feature-level baselines"""

    def setUp(self):
        """Set up test fixtures"""
        self.bag = BagRepresentations("b", np.random.default_rng(3).normal(size=(10, 4)))

    def test_none_is_identity(self):
        """Test mode none returns the input values"""
        out = baseline_augment(self.bag, "none", MilConfig(), np.random.default_rng(0))
        np.testing.assert_array_equal(out.values, self.bag.values)

    def test_random_perturb_statistics(self):
        """Test added noise has the configured scale"""
        values = np.zeros((20_000, 4))
        out = baseline_augment(values, "random-perturb", MilConfig(perturb_scale=0.5), np.random.default_rng(1))
        self.assertIsInstance(out, np.ndarray)
        self.assertAlmostEqual(float(out.std()), 0.5, delta=0.01)
        self.assertAlmostEqual(float(out.mean()), 0.0, delta=0.01)

    def test_mc_discard_keeps_subset(self):
        """Test mc-discard keeps whole rows and at least one"""
        out = baseline_augment(self.bag, "mc-discard", MilConfig(keep_prob=0.5), np.random.default_rng(2))
        self.assertGreaterEqual(out.count, 1)
        self.assertLessEqual(out.count, 10)
        original_rows = {tuple(row) for row in self.bag.values}
        self.assertTrue(all(tuple(row) in original_rows for row in out.values))

    def test_mc_discard_never_empties_a_bag(self):
        """Test a tiny keep probability still leaves one patch"""
        single = BagRepresentations("s", np.ones((1, 4)))
        for seed in range(20):
            out = baseline_augment(single, "mc-discard", MilConfig(keep_prob=0.05), np.random.default_rng(seed))
            self.assertEqual(out.count, 1)

    def test_full_keep_probability(self):
        """Test q = 1 keeps every patch"""
        out = baseline_augment(self.bag, "mc-discard", MilConfig(keep_prob=1.0), np.random.default_rng(0))
        np.testing.assert_array_equal(out.values, self.bag.values)

    def test_invalid_arguments(self):
        """Test unknown modes and q outside (0, 1] raise"""
        with self.assertRaises(ValueError):
            baseline_augment(self.bag, "prs", MilConfig(), np.random.default_rng(0))
        with self.assertRaises(DomainError):
            baseline_augment(self.bag, "mc-discard", MilConfig(keep_prob=0.0), np.random.default_rng(0))


class TestBagFeeder(unittest.TestCase):
    """Test cases for per-visit bag representations"""

    def setUp(self):
        """Set up test fixtures"""
        self.store, _ = separable_store()

    def test_none_feeds_means(self):
        """Test mode none feeds the stored means"""
        feeder = BagFeeder(self.store, "none", MilConfig(), StoreConfig(), seed=0)
        np.testing.assert_array_equal(feeder("bag_0000", 0).values, self.store.bag("bag_0000").mu)

    def test_prs_is_reproducible_per_counter(self):
        """Test (seed, bag, counter) fixes the sample and counters differ"""
        feeder = BagFeeder(self.store, "prs", MilConfig(), StoreConfig(), seed=4)
        again = BagFeeder(self.store, "prs", MilConfig(), StoreConfig(), seed=4)
        np.testing.assert_array_equal(feeder("bag_0001", 3).values, again("bag_0001", 3).values)
        self.assertFalse(np.array_equal(feeder("bag_0001", 3).values, feeder("bag_0001", 4).values))

    def test_zero_noise_prs_equals_none(self):
        """Test noise_scale 0 reduces PRS to the means"""
        feeder = BagFeeder(self.store, "prs", MilConfig(), StoreConfig(noise_scale=0.0), seed=0)
        np.testing.assert_array_equal(feeder("bag_0002", 0).values, mean_bag(self.store, "bag_0002").values)

    def test_prs_raw_uses_unprompted_sigma(self):
        """Test prs-raw samples with the raw sigma"""
        feeder = BagFeeder(self.store, "prs-raw", MilConfig(), StoreConfig(), seed=5)
        expected = sample_bag(
            self.store, "bag_0000", None, feeder.sampler.rng_for("bag_0000", 2), prompted=False
        )
        np.testing.assert_array_equal(feeder("bag_0000", 2).values, expected.values)

    def test_fixed_prompt_operators(self):
        """Test prompt_ops pins the prompt for every visit"""
        cfg = MilConfig(prompt_ops=["Grayscale"])
        feeder = BagFeeder(self.store, "prs", cfg, StoreConfig(), seed=0)
        self.assertEqual(feeder.prompts_for("bag_0000", 0).active, [3])
        self.assertEqual(feeder.prompts_for("bag_0000", 0), feeder.prompts_for("bag_0001", 9))

    def test_per_patch_prompts(self):
        """Test one prompt per patch when requested"""
        feeder = BagFeeder(self.store, "prs", MilConfig(per_patch_prompts=True), StoreConfig(), seed=0)
        self.assertEqual(len(feeder.prompts_for("bag_0000", 0)), 6)

    def test_baseline_stream(self):
        """Test baselines draw from the (seed, bag, counter) stream"""
        cfg = MilConfig(perturb_scale=0.1)
        feeder = BagFeeder(self.store, "random-perturb", cfg, StoreConfig(), seed=6)
        expected = baseline_augment(
            mean_bag(self.store, "bag_0003"), "random-perturb", cfg, derive_rng(6, "mil-aug", "bag_0003", 1)
        )
        np.testing.assert_array_equal(feeder("bag_0003", 1).values, expected.values)

    def test_unknown_mode_rejected(self):
        """Test modes outside the known set raise"""
        with self.assertRaises(ValueError):
            BagFeeder(self.store, "mixup", MilConfig(), StoreConfig(), seed=0)


class TestTrainAndEvaluate(unittest.TestCase):
    """Test cases for train_mil and evaluate"""

    def setUp(self):
        """Set up test fixtures"""
        self.store, self.splits = separable_store()
        self.cfg = MilConfig(hidden_dim=8, epochs=15, lr=0.1)

    def test_learns_separable_bags(self):
        """Test a separable benchmark reaches high test AUC"""
        model = train_mil(self.store, self.splits, self.cfg, seed=0)
        metrics = evaluate(model, self.store, self.splits["test"])
        self.assertGreaterEqual(metrics.auc, 0.9)
        self.assertEqual(metrics.count, 6)
        self.assertTrue(0 <= model.best_epoch < self.cfg.epochs)

    def test_training_is_deterministic(self):
        """Test one seed gives bit-identical models for every mode"""
        for mode in ("none", "prs", "mc-discard"):
            first = train_mil(self.store, self.splits, self.cfg, mode, seed=3).snapshot()
            second = train_mil(self.store, self.splits, self.cfg, mode, seed=3).snapshot()
            for name in first:
                np.testing.assert_array_equal(first[name], second[name])

    def test_step_resampling(self):
        """Test step-level resampling trains and differs from epoch-level"""
        cfg = MilConfig(hidden_dim=8, epochs=3, lr=0.1, resample="step")
        step_model = train_mil(self.store, self.splits, cfg, "prs", seed=1).snapshot()
        epoch_cfg = MilConfig(hidden_dim=8, epochs=3, lr=0.1)
        epoch_model = train_mil(self.store, self.splits, epoch_cfg, "prs", seed=1).snapshot()
        self.assertFalse(all(np.array_equal(step_model[k], epoch_model[k]) for k in step_model))

    def test_single_class_validation_keeps_latest_epoch(self):
        """Test validation without a defined AUC keeps the last epoch's weights"""
        labels = self.store.labels()
        splits = dict(self.splits, val=[b for b in self.splits["val"] if labels[b] == 0])
        cfg = MilConfig(hidden_dim=8, epochs=5, lr=0.1)

        with self.assertLogs(level="WARNING"):
            model = train_mil(self.store, splits, cfg, seed=0)
        self.assertEqual(model.best_epoch, 4)

        unvalidated = train_mil(self.store, dict(splits, val=[]), cfg, seed=0)
        for name, value in unvalidated.snapshot().items():
            np.testing.assert_array_equal(model.snapshot()[name], value)

    def test_missing_label(self):
        """Test a training bag without a label raises"""
        labels = {bag_id: label for bag_id, label in self.store.labels().items() if bag_id != "bag_0000"}
        with self.assertRaises(MissingLabelError) as context:
            train_mil(self.store, self.splits, self.cfg, labels=labels)
        self.assertEqual(context.exception.bag_id, "bag_0000")

    def test_empty_train_split(self):
        """Test an empty train split raises"""
        with self.assertRaises(ValueError):
            train_mil(self.store, {"train": [], "val": []}, self.cfg)

    def test_evaluate_empty_split(self):
        """Test evaluating no bags raises"""
        model = MilModel.build(4, 8, 2, np.random.default_rng(0))
        with self.assertRaises(MetricError):
            evaluate(model, self.store, [])

    def test_compare_augmentations_rows(self):
        """Test one row per (mode, seed) with all metric columns"""
        cfg = MilConfig(hidden_dim=4, epochs=2, lr=0.1)
        rows = compare_augmentations(self.store, self.splits, cfg, ["none", "prs"], [0, 1])
        self.assertEqual([(r["method"], r["seed"]) for r in rows], [("none", 0), ("none", 1), ("prs", 0), ("prs", 1)])
        for row in rows:
            self.assertEqual(set(row), {"method", "seed", "split", "auc", "f1", "accuracy", "count"})
            self.assertEqual(row["split"], "test")


class TestMilPersistence(unittest.TestCase):
    """Test cases for MIL model files"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = Path(self.temp_dir.name) / "model.pmil"

    def tearDown(self):
        """Clean up test fixtures"""
        self.temp_dir.cleanup()

    def test_round_trip(self):
        """Test parameters and best epoch survive save/load"""
        model = MilModel.build(4, 3, 2, np.random.default_rng(0))
        model.best_epoch = 7
        loaded = load_mil_model(save_mil_model(model, self.path))
        self.assertEqual(loaded.best_epoch, 7)
        for name, values in model.snapshot().items():
            np.testing.assert_array_equal(loaded.snapshot()[name], values)

    def test_header_shape_disagreement(self):
        """Test blobs that contradict the header raise"""
        blobs = OrderedDict(
            [("V", np.zeros((4, 3))), ("w", np.zeros((3, 1))), ("W", np.zeros((4, 2))), ("b", np.zeros(3))]
        )
        write_blob_file(self.path, b"PMIL", 1, (4, 3, 2), blobs)
        with self.assertRaises(CheckpointFormatError):
            load_mil_model(self.path)


if __name__ == "__main__":
    unittest.main()
