"""
PRDL

Promptable representation distribution learning on toy images, and
promptable representation sampling (PRS) as feature augmentation for
attention-based multiple instance learning.
"""

__version__ = "0.1.0"
__author__ = "PRDL Contributors"
__email__ = "contact@example.com"

from .augment import ViewAugmenter
from .config import RunConfig, load_config
from .errors import PRDLError
from .mil import MilModel, evaluate, train_mil
from .store import PrsStore, extract_distributions, mean_bag, sample_bag
from .trainer import PRDLTrainer, pretrain

__all__ = [
    "ViewAugmenter",
    "RunConfig",
    "load_config",
    "PRDLError",
    "MilModel",
    "train_mil",
    "evaluate",
    "PrsStore",
    "extract_distributions",
    "sample_bag",
    "mean_bag",
    "PRDLTrainer",
    "pretrain",
]
