"""
Bag (slide) data models.
"""

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from ..errors import ShapeMismatchError
from .image import ToyImage


@dataclass
class BagRecord:
    """One synthetic slide: ordered patches plus a bag-level label."""

    bag_id: str
    label: int
    patches: List[ToyImage] = field(default_factory=list)
    positive_mask: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)


@dataclass
class BagRepresentations:
    """n x D matrix of patch representations for one bag."""

    bag_id: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ShapeMismatchError("BagRepresentations", self.values.shape, ("n", "D"))

    @property
    def count(self) -> int:
        return int(self.values.shape[0])


@dataclass
class SyntheticDataset:
    """Bags partitioned into train/val/test splits."""

    train: List[BagRecord] = field(default_factory=list)
    val: List[BagRecord] = field(default_factory=list)
    test: List[BagRecord] = field(default_factory=list)

    def splits(self) -> Dict[str, List[BagRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def all_bags(self) -> List[BagRecord]:
        return self.train + self.val + self.test

    def split_of(self) -> Dict[str, str]:
        """Map bag id to split name."""
        return {
            bag.bag_id: name for name, bags in self.splits().items() for bag in bags
        }
