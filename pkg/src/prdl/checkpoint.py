"""
Model checkpoint persistence.

Checkpoints use the named-blob container with magic "PRDL" and header
(D, K, P). Blobs hold student and teacher parameters, the teacher center,
the step counter and the activation code, all as float64 little-endian.
"""

import logging
import re
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import CheckpointFormatError
from .network import (
    ACTIVATIONS,
    DenseStack,
    DistributionHeads,
    MaskMatrix,
    StudentNetwork,
    TeacherNetwork,
)
from .autodiff import Tensor
from .utils.blobs import read_blob_file, write_blob_file

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PRDL"
CHECKPOINT_VERSION = 1

_LAYER_PATTERN = re.compile(r"^(?P<stack>.+)\.(?P<index>\d+)\.(?P<kind>weight|bias)$")


@dataclass
class Checkpoint:
    student: StudentNetwork
    teacher: TeacherNetwork
    center: np.ndarray
    step: int

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.student.embed_dim, self.student.num_operators, self.student.out_dim


def save_checkpoint(
    path: Union[str, Path],
    student: StudentNetwork,
    teacher: TeacherNetwork,
    center: np.ndarray,
    step: int,
) -> Path:
    """Write a bit-exact checkpoint."""
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, tensor in student.named_parameters().items():
        blobs[f"student.{name}"] = tensor.data
    for name, tensor in teacher.named_parameters().items():
        blobs[f"teacher.{name}"] = tensor.data
    blobs["center"] = np.asarray(center, dtype=np.float64)
    blobs["step"] = np.array([float(step)])
    blobs["activation"] = np.array([float(ACTIVATIONS.index(student.encoder.activation))])

    header = (student.embed_dim, student.num_operators, student.out_dim)
    try:
        written = write_blob_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, blobs)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise
    logger.info(f"Saved checkpoint at step {step} to {written}")
    return written


def _stack_arrays(
    blobs: Dict[str, np.ndarray], prefix: str
) -> List[Tuple[np.ndarray, np.ndarray]]:
    layers: Dict[int, Dict[str, np.ndarray]] = {}
    for name, values in blobs.items():
        match = _LAYER_PATTERN.match(name)
        if match and match.group("stack") == prefix:
            layers.setdefault(int(match.group("index")), {})[match.group("kind")] = values
    if not layers or sorted(layers) != list(range(len(layers))):
        raise CheckpointFormatError(f"Missing or non-contiguous layers for '{prefix}'", 0)
    arrays = []
    for index in range(len(layers)):
        entry = layers[index]
        if "weight" not in entry or "bias" not in entry:
            raise CheckpointFormatError(f"Incomplete layer {prefix}.{index}", 0)
        arrays.append((entry["weight"], entry["bias"]))
    return arrays


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Rebuild networks from a checkpoint file; shapes come from the blobs."""
    header, blobs = read_blob_file(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, 3)
    embed_dim, num_operators, out_dim = header
    for required in ("center", "step", "activation", "student.mask.logits"):
        if required not in blobs:
            raise CheckpointFormatError(f"Missing blob '{required}'", 0)
    activation = ACTIVATIONS[int(blobs["activation"][0])]

    def stack(prefix: str, requires_grad: bool) -> DenseStack:
        return DenseStack.from_arrays(_stack_arrays(blobs, prefix), activation, requires_grad)

    student = StudentNetwork(
        encoder=stack("student.encoder", True),
        projector=stack("student.projector", True),
        heads=DistributionHeads(
            mu=stack("student.heads.mu", True),
            log_var=stack("student.heads.log_var", True),
        ),
        mask=MaskMatrix(Tensor(blobs["student.mask.logits"], True, "mask.logits")),
    )
    teacher = TeacherNetwork(
        encoder=stack("teacher.encoder", False),
        projector=stack("teacher.projector", False),
    )
    found = (student.embed_dim, student.num_operators, student.out_dim)
    if found != (embed_dim, num_operators, out_dim):
        raise CheckpointFormatError(
            f"Header dims (D, K, P)={header} disagree with parameters {found}", 4
        )
    logger.info(f"Loaded checkpoint {path} (D={embed_dim}, K={num_operators}, P={out_dim})")
    return Checkpoint(student, teacher, blobs["center"], int(blobs["step"][0]))
