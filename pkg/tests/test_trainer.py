"""
Tests for PRDL pretraining
"""

import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np

from src.prdl import autodiff as ad
from src.prdl.config import config_from_dict
from src.prdl.errors import ConfigError, NonFiniteLossError
from src.prdl.models.image import ToyImage
from src.prdl.models.results import LossBreakdown
from src.prdl.schedules import ScheduleValues
from src.prdl.trainer import (
    ForwardResult,
    PRDLTrainer,
    apply_gradients,
    build_augmenter,
    forward_losses,
    pretrain,
    read_final_eval_loss,
    reload_probe_loss,
)
from src.prdl.utils.seeding import derive_rng


def tiny_config(**pretrain_overrides):
    pretrain_section = {
        "batch_size": 3,
        "epochs": 2,
        "n_local": 1,
        "warmup_steps": 1,
        "lr_reference": 0.05,
        "teacher_temp_warmup_epochs": 1,
    }
    pretrain_section.update(pretrain_overrides)
    return config_from_dict(
        {
            "seed": 5,
            "model": {
                "embed_dim": 6,
                "hidden_dims": [12],
                "projector_hidden": 8,
                "out_dim": 5,
            },
            "pretrain": pretrain_section,
        }
    )


def toy_images(count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [ToyImage(rng.random((16, 16, 3))) for _ in range(count)]


class TestApplyGradients(unittest.TestCase):
    """Test cases for the gradient-descent update"""

    def test_plain_step(self):
        """Test p <- p - lr * g and gradients are cleared"""
        p = ad.parameter(np.array([1.0, 2.0]), "p")
        p.grad = np.array([0.5, -1.0])
        norm = apply_gradients([p], 0.1)
        np.testing.assert_allclose(p.data, [0.95, 2.1])
        self.assertAlmostEqual(norm, math.sqrt(1.25))
        self.assertIsNone(p.grad)

    def test_global_norm_clipping(self):
        """Test gradients above the clip are rescaled to the clip norm"""
        p = ad.parameter(np.zeros(2), "p")
        p.grad = np.array([3.0, 4.0])
        norm = apply_gradients([p], 1.0, grad_clip=1.0)
        self.assertEqual(norm, 5.0)
        np.testing.assert_allclose(p.data, [-0.6, -0.8])

    def test_missing_gradient_is_zero(self):
        """Test parameters without gradients stay put"""
        p = ad.parameter(np.ones(3), "p")
        apply_gradients([p], 0.5)
        np.testing.assert_array_equal(p.data, np.ones(3))


class TestBuildAugmenter(unittest.TestCase):
    """Test cases for the config-driven augmenter"""

    def test_jitter_probability_comes_from_config(self):
        """Test pretrain.augment.jitter_prob reaches pre-augmentation"""
        image = toy_images(1, seed=6)[0]
        augment = {"flip_prob": 0.0, "grayscale_prob": 0.0}

        never = build_augmenter(tiny_config(augment={**augment, "jitter_prob": 0.0}))
        self.assertEqual(never.jitter_prob, 0.0)
        self.assertEqual(never.pre_augment(image, np.random.default_rng(0)), image)

        always = build_augmenter(tiny_config(augment={**augment, "jitter_prob": 1.0}))
        self.assertNotEqual(always.pre_augment(image, np.random.default_rng(0)), image)

    def test_default_jitter_probability(self):
        """Test the default colour jitter probability"""
        self.assertEqual(build_augmenter(tiny_config()).jitter_prob, 0.8)

    def test_jitter_probability_validated(self):
        """Test an out-of-range jitter probability names its key"""
        with self.assertRaises(ConfigError) as context:
            tiny_config(augment={"jitter_prob": 1.5})
        self.assertEqual(context.exception.key_path, "pretrain.augment.jitter_prob")


class TestTrainStep(unittest.TestCase):
    """Test cases for PRDLTrainer.train_step"""

    def setUp(self):
        """Set up test fixtures"""
        self.cfg = tiny_config()
        self.trainer = PRDLTrainer(self.cfg)
        self.images = toy_images(3)

    def test_step_updates_state(self):
        """Test one step returns finite losses and moves the student and teacher"""
        state = self.trainer.init_state(0)
        state.total_steps = 10
        student_before = {k: v.numpy() for k, v in state.student.named_parameters().items()}
        teacher_before = state.teacher.encoder.layers[0][0].numpy()

        values = ScheduleValues(lr=0.05, momentum=0.9, teacher_temp=0.04)
        _, breakdown = self.trainer.train_step(state, self.images, derive_rng(0, "step", 0), values)

        self.assertTrue(breakdown.is_finite())
        self.assertIsNone(breakdown.graph)
        self.assertEqual(state.step, 1)
        self.assertEqual(len(state.history), 1)
        changed = [
            name
            for name, tensor in state.student.named_parameters().items()
            if not np.array_equal(tensor.data, student_before[name])
        ]
        self.assertIn("mask.logits", changed)
        self.assertIn("heads.log_var.0.weight", changed)
        self.assertFalse(np.array_equal(state.teacher.encoder.layers[0][0].data, teacher_before))
        masks = state.student.mask.values()
        self.assertTrue(np.all((masks > 0) & (masks < 1)))

    def test_inputs_have_expected_shapes(self):
        """Test view tensors are (B, T, 768) and (B, n_local, 768)"""
        inputs = self.trainer.build_inputs(self.images, np.random.default_rng(1))
        self.assertEqual(inputs.global_views.shape, (3, 2, 768))
        self.assertEqual(inputs.local_views.shape, (3, 1, 768))
        self.assertEqual(inputs.teacher_prompts.shape, (3, 2, 6))
        self.assertEqual(inputs.eps.shape, (3, 2, 6))
        self.assertEqual(inputs.student_views().shape, (3, 3, 768))

    def test_multi_crop_only_ablation(self):
        """Test disabling the representation branch drops the extra terms"""
        state = self.trainer.init_state(0)
        inputs = self.trainer.build_inputs(self.images, np.random.default_rng(2))
        result = forward_losses(
            state.student, state.teacher, inputs, state.center, 0.04, self.cfg.loss, False
        )
        self.assertEqual(result.breakdown.kl, 0.0)
        self.assertEqual(result.breakdown.total, result.breakdown.ce)
        self.assertIsNone(result.sampled_probs)

    def test_branch_switch_leaves_mask_untouched(self):
        """Test use_representation_branch=False trains without the mask terms"""
        trainer = PRDLTrainer(tiny_config(use_representation_branch=False))
        state = trainer.init_state(0)
        state.total_steps = 10
        mask_before = state.student.mask.values().copy()

        values = ScheduleValues(lr=0.05, momentum=0.9, teacher_temp=0.04)
        _, breakdown = trainer.train_step(state, self.images, derive_rng(0, "step", 0), values)

        self.assertEqual((breakdown.kl, breakdown.sparsity, breakdown.variance), (0.0, 0.0, 0.0))
        self.assertEqual(breakdown.total, breakdown.ce)
        np.testing.assert_array_equal(state.student.mask.values(), mask_before)

    def test_sample_noise_switch(self):
        """Test sample_noise=False fixes the sampling noise at zero"""
        trainer = PRDLTrainer(tiny_config(sample_noise=False))
        inputs = trainer.build_inputs(self.images, np.random.default_rng(1))
        np.testing.assert_array_equal(inputs.eps, np.zeros((3, 2, 6)))

    def test_non_finite_loss_raises(self):
        """Test a NaN loss stops training with the step number"""
        state = self.trainer.init_state(0)
        nan = float("nan")
        bad = ForwardResult(
            LossBreakdown(nan, 0.0, 0.0, 0.0, nan), np.zeros((6, 5)), np.zeros((3, 2, 5)), None
        )
        with patch("src.prdl.trainer.forward_losses", return_value=bad):
            with self.assertRaises(NonFiniteLossError) as context:
                self.trainer.train_step(state, self.images, np.random.default_rng(0))
        self.assertEqual(context.exception.step, 0)
        self.assertEqual(state.step, 0)

    def test_empty_batch_rejected(self):
        """Test an empty batch raises"""
        with self.assertRaises(ValueError):
            self.trainer.build_inputs([], np.random.default_rng(0))


class TestFit(unittest.TestCase):
    """Test cases for full pretraining runs"""

    def setUp(self):
        """Set up test fixtures"""
        self.cfg = tiny_config()
        self.images = toy_images(5, seed=3)

    def _final_parameters(self, threads: int):
        state, rows = PRDLTrainer(self.cfg, threads).fit(self.images, seed=11)
        return {k: v.numpy() for k, v in state.student.named_parameters().items()}, rows

    def test_same_seed_is_bit_exact(self):
        """Test two runs with one seed give identical parameters and logs"""
        first, rows_a = self._final_parameters(1)
        second, rows_b = self._final_parameters(1)
        self.assertEqual(rows_a, rows_b)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_thread_count_does_not_change_results(self):
        """Test view composition on several threads is bit-exact"""
        single, _ = self._final_parameters(1)
        multi, _ = self._final_parameters(3)
        for name in single:
            np.testing.assert_array_equal(single[name], multi[name])

    def test_rows_per_epoch(self):
        """Test one log row per epoch with the schedule columns"""
        _, rows = self._final_parameters(1)
        self.assertEqual([row["epoch"] for row in rows], [0, 1])
        for key in ("L_CE", "L_KL", "L_sp", "L_var", "L_total", "lr", "lambda", "tau_t"):
            self.assertIn(key, rows[0])
        self.assertEqual(rows[-1]["lambda"], 1.0)

    def test_empty_dataset_rejected(self):
        """Test fitting on no images raises"""
        with self.assertRaises(ValueError):
            PRDLTrainer(self.cfg).fit([], seed=0)


class TestPretrainArtifacts(unittest.TestCase):
    """Test cases for pretrain outputs"""

    def setUp(self):
        """Set up test fixtures"""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.out = Path(self.temp_dir.name) / "run"
        self.cfg = tiny_config(epochs=1)
        self.images = toy_images(4, seed=8)

    def tearDown(self):
        """Clean up test fixtures"""
        self.temp_dir.cleanup()

    def test_writes_checkpoint_and_log(self):
        """Test pretrain writes both artifacts and the probe loss"""
        result = pretrain(self.cfg, self.images, self.out, seed=2)
        self.assertTrue(result.checkpoint_path.exists())
        self.assertEqual(result.checkpoint_path.name, "checkpoint.prdl")
        lines = result.log_path.read_text(encoding="utf-8").splitlines()
        self.assertTrue(lines[0].startswith("epoch\tL_CE"))
        self.assertEqual(len(lines), 3)
        self.assertEqual(read_final_eval_loss(result.log_path), result.final_eval_loss)
        self.assertTrue(math.isfinite(result.final_eval_loss))

    def test_reload_reproduces_probe_loss(self):
        """Test the probe loss recomputed from the checkpoint is bit-exact"""
        result = pretrain(self.cfg, self.images, self.out, seed=2)
        reloaded = reload_probe_loss(self.cfg, result.checkpoint_path, self.images, 2)
        self.assertEqual(reloaded, result.final_eval_loss)


if __name__ == "__main__":
    unittest.main()
