"""
Exception hierarchy shared by every PRDL module.

Validation failures subclass ``ValueError`` so the CLI can map them to exit
code 1; everything else is treated as a runtime failure.
"""

from typing import Any, Optional, Sequence, Tuple


class PRDLError(Exception):
    """Base class for all PRDL errors."""


class ShapeMismatchError(PRDLError, ValueError):
    """Raised when two operands cannot be combined."""

    def __init__(
        self, operation: str, left: Sequence[int], right: Sequence[int]
    ) -> None:
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(
            f"{operation}: incompatible shapes {self.left} and {self.right}"
        )


class DomainError(PRDLError, ValueError):
    """Raised when an argument falls outside an operation's domain."""


class InvalidPromptError(PRDLError, ValueError):
    """Raised for malformed or all-zero augmentation prompts."""


class ConfigError(PRDLError, ValueError):
    """Raised for unknown keys or invalid values in a run configuration."""

    def __init__(self, key_path: str, message: str) -> None:
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


class StoreFormatError(PRDLError, ValueError):
    """Raised when a PRS store file cannot be parsed."""

    def __init__(self, message: str, offset: int) -> None:
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class CheckpointFormatError(StoreFormatError):
    """Raised when a checkpoint or model blob file cannot be parsed."""


class NonFiniteLossError(PRDLError, RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, step: int, breakdown: Any) -> None:
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"Non-finite loss at step {step}: {breakdown}")


class MetricError(PRDLError, ValueError):
    """Raised when a metric is undefined for the given labels."""


class UnknownBagError(PRDLError, KeyError):
    """Raised when a bag identifier is not present in a store."""

    def __init__(self, bag_id: str, known: Optional[Tuple[str, ...]] = None):
        self.bag_id = bag_id
        hint = f" ({len(known)} bags in store)" if known is not None else ""
        super().__init__(f"Unknown bag '{bag_id}'{hint}")

    def __str__(self) -> str:
        return self.args[0]


class MissingLabelError(PRDLError, ValueError):
    """Raised when a bag selected for MIL training has no label."""

    def __init__(self, bag_id: str):
        self.bag_id = bag_id
        super().__init__(f"No label for bag '{bag_id}'")
