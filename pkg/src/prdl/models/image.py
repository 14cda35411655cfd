"""
Toy image and view data models.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import ShapeMismatchError
from .prompt import Prompt


class ViewKind(Enum):
    """Multi-crop view kinds."""

    GLOBAL = "global"
    LOCAL = "local"


@dataclass(frozen=True)
class ToyImage:
    """
    RGB image with float64 channel values in [0, 1].

    ``pixels`` has shape (height, width, 3). Values are clamped on
    construction, so every operator output satisfies the range invariant.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        array = np.array(self.pixels, dtype=np.float64)
        if array.ndim != 3 or array.shape[2] != 3:
            raise ShapeMismatchError("ToyImage", array.shape, ("h", "w", 3))
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise ShapeMismatchError("ToyImage", array.shape, ("h>0", "w>0", 3))
        np.clip(array, 0.0, 1.0, out=array)
        array.setflags(write=False)
        object.__setattr__(self, "pixels", array)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def size(self):
        """(width, height), matching PIL's convention."""
        return self.width, self.height

    def flatten(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ToyImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self) -> int:
        return hash(self.pixels.tobytes())


@dataclass(frozen=True)
class View:
    """An augmented view at the canonical encoder input size."""

    image: ToyImage
    kind: ViewKind
    prompt: Prompt

    def flatten(self) -> np.ndarray:
        return self.image.flatten()
