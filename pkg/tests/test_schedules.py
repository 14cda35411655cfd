"""
Tests for learning-rate, momentum and temperature schedules
"""

import unittest

from src.prdl.config import TrainConfig
from src.prdl.schedules import (
    ema_momentum,
    learning_rate,
    schedule,
    teacher_temperature,
)


class TestLearningRate(unittest.TestCase):
    """Test cases for warmup plus cosine decay"""

    def test_warmup_is_linear(self):
        """Test lr ramps linearly from 0 to the base rate"""
        self.assertEqual(learning_rate(0, 100, 0.1, 10, 0.0), 0.0)
        self.assertAlmostEqual(learning_rate(5, 100, 0.1, 10, 0.0), 0.05)
        self.assertAlmostEqual(learning_rate(10, 100, 0.1, 10, 0.0), 0.1)

    def test_decays_to_minimum_at_last_step(self):
        """Test the final step reaches min_lr"""
        self.assertAlmostEqual(learning_rate(99, 100, 0.1, 10, 1e-4), 1e-4)

    def test_monotone_after_warmup(self):
        """Test the decay never increases"""
        values = [learning_rate(s, 50, 0.2, 5, 0.0) for s in range(5, 50)]
        self.assertTrue(all(a >= b for a, b in zip(values, values[1:])))

    def test_no_warmup(self):
        """Test zero warmup starts at the base rate"""
        self.assertAlmostEqual(learning_rate(0, 20, 0.3, 0, 0.0), 0.3)


class TestMomentumAndTemperature(unittest.TestCase):
    """Test cases for the EMA momentum and teacher temperature"""

    def test_momentum_end_points(self):
        """Test momentum goes from the start value to exactly 1"""
        self.assertAlmostEqual(ema_momentum(0, 100, 0.996), 0.996)
        self.assertEqual(ema_momentum(99, 100, 0.996), 1.0)

    def test_momentum_increases(self):
        """Test momentum is non-decreasing"""
        values = [ema_momentum(s, 40, 0.9) for s in range(40)]
        self.assertTrue(all(a <= b for a, b in zip(values, values[1:])))

    def test_single_step_run(self):
        """Test a one-step run uses momentum 1"""
        self.assertEqual(ema_momentum(0, 1, 0.5), 1.0)

    def test_temperature_ramp(self):
        """Test the linear ramp and the plateau"""
        self.assertAlmostEqual(teacher_temperature(0, 0.04, 0.07, 10), 0.04)
        self.assertAlmostEqual(teacher_temperature(5, 0.04, 0.07, 10), 0.055)
        self.assertEqual(teacher_temperature(10, 0.04, 0.07, 10), 0.07)
        self.assertEqual(teacher_temperature(3, 0.04, 0.07, 0), 0.07)


class TestSchedule(unittest.TestCase):
    """Test cases for the combined schedule"""

    def test_uses_linear_scaling_rule(self):
        """Test the base rate is lr_reference * batch / 256"""
        cfg = TrainConfig(batch_size=64, lr_reference=0.0005, warmup_steps=0)
        values = schedule(0, 0, cfg, total_steps=100)
        self.assertAlmostEqual(values.lr, 0.000125)
        self.assertAlmostEqual(values.momentum, cfg.ema_start)
        self.assertAlmostEqual(values.teacher_temp, cfg.teacher_temp_start)

    def test_negative_step_rejected(self):
        """Test negative steps raise"""
        with self.assertRaises(ValueError):
            schedule(-1, 0, TrainConfig(), total_steps=10)


if __name__ == "__main__":
    unittest.main()
