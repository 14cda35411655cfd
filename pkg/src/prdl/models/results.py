"""
Result data models: loss breakdowns and evaluation metrics.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from ..autodiff import Tensor


@dataclass
class LossBreakdown:
    """Per-term pretraining losses; ``graph`` keeps the differentiable total."""

    ce: float
    kl: float
    sparsity: float
    variance: float
    total: float
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v) for v in (self.ce, self.kl, self.sparsity, self.variance, self.total)
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "L_CE": self.ce,
            "L_KL": self.kl,
            "L_sp": self.sparsity,
            "L_var": self.variance,
            "L_total": self.total,
        }


@dataclass
class EvaluationMetrics:
    """Bag-level classification metrics, all in [0, 1]."""

    auc: float
    f1: float
    accuracy: float
    count: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "auc": self.auc,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "count": self.count,
        }
