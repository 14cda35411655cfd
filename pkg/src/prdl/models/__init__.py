"""
Data models for the PRDL framework.
"""

from .bag import BagRecord, BagRepresentations, SyntheticDataset
from .distribution import ReprDistribution
from .image import ToyImage, View, ViewKind
from .prompt import NUM_OPERATORS, OPERATOR_NAMES, Prompt
from .results import EvaluationMetrics, LossBreakdown

__all__ = [
    "BagRecord",
    "BagRepresentations",
    "SyntheticDataset",
    "ReprDistribution",
    "ToyImage",
    "View",
    "ViewKind",
    "Prompt",
    "OPERATOR_NAMES",
    "NUM_OPERATORS",
    "EvaluationMetrics",
    "LossBreakdown",
]
