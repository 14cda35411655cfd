"""
Representation distribution data model.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..autodiff import Tensor
from ..errors import DomainError, ShapeMismatchError


@dataclass
class ReprDistribution:
    """Per-patch diagonal Gaussian N(mu, sigma^2) in representation space."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.sigma.shape:
            raise ShapeMismatchError("ReprDistribution", self.mu.shape, self.sigma.shape)
        if not np.all(self.sigma.data > 0):
            raise DomainError("ReprDistribution: sigma must be strictly positive")

    @property
    def dim(self) -> int:
        return int(self.mu.shape[-1])

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.mu.numpy(), self.sigma.numpy()
