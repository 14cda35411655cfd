"""
Training schedules: learning rate, EMA momentum and teacher temperature.

All schedules are stateless functions of the step (or epoch).
"""

import math
from typing import NamedTuple

from .config import TrainConfig


class ScheduleValues(NamedTuple):
    lr: float
    momentum: float
    teacher_temp: float


def _cosine_anneal(x: float, min_y: float = 0.0, max_y: float = 1.0) -> float:
    """cos on [0, pi] stretched to [0, 1] -> [max_y, min_y]; x is clipped."""
    x = min(max(x, 0.0), 1.0)
    return min_y + (max_y - min_y) * (1 + math.cos(x * math.pi)) / 2


def learning_rate(
    step: int, total_steps: int, base_lr: float, warmup_steps: int, min_lr: float
) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    decay_steps = max(total_steps - warmup_steps - 1, 1)
    return _cosine_anneal((step - warmup_steps) / decay_steps, min(min_lr, base_lr), base_lr)


def ema_momentum(step: int, total_steps: int, start: float) -> float:
    """Cosine increase from ``start`` at step 0 to exactly 1 at the final step."""
    last = total_steps - 1
    if last <= 0:
        return 1.0
    return 1.0 - (1.0 - start) * (math.cos(math.pi * min(step, last) / last) + 1.0) / 2.0


def teacher_temperature(epoch: int, start: float, end: float, warmup_epochs: int) -> float:
    """Linear ramp over ``warmup_epochs``, constant afterwards."""
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return end
    return start + (end - start) * epoch / warmup_epochs


def schedule(step: int, epoch: int, cfg: TrainConfig, total_steps: int) -> ScheduleValues:
    """
    Scheduled values for one training step.

    Args:
        step: Global step (0-based)
        epoch: Current epoch (0-based)
        cfg: Pretraining configuration
        total_steps: Steps in the whole run

    Returns:
        ScheduleValues(lr, momentum, teacher_temp)
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return ScheduleValues(
        lr=learning_rate(step, total_steps, cfg.base_lr(), cfg.warmup_steps, cfg.min_lr),
        momentum=ema_momentum(step, total_steps, cfg.ema_start),
        teacher_temp=teacher_temperature(
            epoch, cfg.teacher_temp_start, cfg.teacher_temp_end, cfg.teacher_temp_warmup_epochs
        ),
    )
