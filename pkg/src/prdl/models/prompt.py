"""
Augmentation prompt data model.
"""

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from ..errors import InvalidPromptError

# Canonical operator order; prompt bit k gates operator k.
OPERATOR_NAMES: Tuple[str, ...] = (
    "ResizedCrop",
    "HorizontalFlip",
    "ColorJitter",
    "Grayscale",
    "GaussianBlur",
    "Solarization",
)
NUM_OPERATORS = len(OPERATOR_NAMES)


def operator_index(name: str) -> int:
    """Resolve an operator name (case-insensitive) to its prompt bit."""
    lowered = name.lower()
    for index, candidate in enumerate(OPERATOR_NAMES):
        if candidate.lower() == lowered:
            return index
    raise InvalidPromptError(
        f"Unknown operator '{name}'; expected one of {', '.join(OPERATOR_NAMES)}"
    )


def validate_bits(bits: Sequence[int], num_operators: int = NUM_OPERATORS) -> np.ndarray:
    """Check a raw bit vector and return it as a float array."""
    array = np.asarray(bits, dtype=np.float64).reshape(-1)
    if array.shape[0] != num_operators:
        raise InvalidPromptError(
            f"Prompt must have {num_operators} bits, got {array.shape[0]}"
        )
    if not np.all((array == 0.0) | (array == 1.0)):
        raise InvalidPromptError(f"Prompt bits must be 0 or 1, got {array.tolist()}")
    if array.sum() == 0:
        raise InvalidPromptError("All-zero prompt selects no augmentation operator")
    return array


@dataclass(frozen=True)
class Prompt:
    """Binary indicator over the augmentation operators (at least one set)."""

    bits: Tuple[int, ...]

    def __post_init__(self) -> None:
        validate_bits(self.bits, len(self.bits) or NUM_OPERATORS)
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))

    @classmethod
    def from_operators(cls, names: Iterable[str]) -> "Prompt":
        bits = [0] * NUM_OPERATORS
        for name in names:
            bits[operator_index(name)] = 1
        return cls(tuple(bits))

    @classmethod
    def single(cls, index: int) -> "Prompt":
        if not 0 <= index < NUM_OPERATORS:
            raise InvalidPromptError(f"Operator index {index} out of range")
        bits = [0] * NUM_OPERATORS
        bits[index] = 1
        return cls(tuple(bits))

    @classmethod
    def all_operators(cls) -> "Prompt":
        return cls(tuple([1] * NUM_OPERATORS))

    @property
    def active(self) -> List[int]:
        return [index for index, bit in enumerate(self.bits) if bit]

    @property
    def count(self) -> int:
        return sum(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)

    def normalized(self) -> np.ndarray:
        """p / ||p||_1, the row-averaging weights over the mask matrix."""
        return self.as_array() / self.count

    def describe(self) -> str:
        return "+".join(OPERATOR_NAMES[i] for i in self.active)
