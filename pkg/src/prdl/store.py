"""
PRS Store

Per-patch representation distributions extracted after pretraining, their
versioned binary file format, and prompted representation sampling.

File layout (little-endian):

    "PRSD" | version u32 | D u32 | K u32 | M as K x D f32 | bag_count u32 |
    per bag: id_len u16 + UTF-8 id + label u32 + patch_count u32 +
             patch_count x (mu: D f32, sigma: D f32) |
    CRC32 u32 over everything before it
"""

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint
from .errors import InvalidPromptError, ShapeMismatchError, StoreFormatError, UnknownBagError
from .models.bag import BagRecord, BagRepresentations
from .models.prompt import Prompt, validate_bits
from .network import estimate_distribution
from .utils.blobs import ByteReader, append_crc, verify_crc
from .utils.parallel import ordered_map
from .utils.seeding import derive_rng

logger = logging.getLogger(__name__)

STORE_MAGIC = b"PRSD"
STORE_VERSION = 1

PromptSpec = Union[Prompt, Sequence[Prompt]]


def _f32(values: np.ndarray) -> np.ndarray:
    """Round to float32 storage precision, keep float64 for arithmetic."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass
class BagDistributions:
    """Per-patch (mu, sigma) rows of one bag."""

    bag_id: str
    label: int
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise ShapeMismatchError(f"bag '{self.bag_id}'", self.mu.shape, self.sigma.shape)
        if not np.all(self.sigma > 0):
            raise ValueError(f"bag '{self.bag_id}': sigma entries must be positive")

    @property
    def count(self) -> int:
        return int(self.mu.shape[0])


@dataclass
class PrsStore:
    """Mask matrix plus the bag table; immutable once built."""

    mask: np.ndarray
    bags: "OrderedDict[str, BagDistributions]" = field(default_factory=OrderedDict)
    version: int = STORE_VERSION

    def __post_init__(self) -> None:
        if self.mask.ndim != 2:
            raise ShapeMismatchError("PrsStore mask", self.mask.shape, ("K", "D"))
        if not (np.all(self.mask > 0) and np.all(self.mask < 1)):
            raise ValueError("PrsStore mask entries must lie in (0, 1)")
        for record in self.bags.values():
            if record.mu.shape[1] != self.dim:
                raise ShapeMismatchError(f"bag '{record.bag_id}'", record.mu.shape, ("n", self.dim))

    @property
    def dim(self) -> int:
        return int(self.mask.shape[1])

    @property
    def num_operators(self) -> int:
        return int(self.mask.shape[0])

    def __len__(self) -> int:
        return len(self.bags)

    def bag(self, bag_id: str) -> BagDistributions:
        try:
            return self.bags[bag_id]
        except KeyError:
            raise UnknownBagError(bag_id, tuple(self.bags)) from None

    def labels(self) -> Dict[str, int]:
        return {bag_id: record.label for bag_id, record in self.bags.items()}

    def equals(self, other: "PrsStore") -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        if self.version != other.version or list(self.bags) != list(other.bags):
            return False
        if not np.array_equal(self.mask, other.mask):
            return False
        return all(
            a.label == b.label and np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)
            for a, b in zip(self.bags.values(), other.bags.values())
        )


def extract_distributions(
    checkpoint: Union[Checkpoint, str, Path],
    bags: Sequence[BagRecord],
    threads: int = 1,
) -> PrsStore:
    """
    Estimate (mu, sigma) for every patch of every bag.

    Args:
        checkpoint: Loaded checkpoint or path to one
        bags: Bags whose patches are at the encoder's canonical size
        threads: Workers over bags

    Returns:
        PrsStore with float32-rounded values and the checkpoint's masks
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    student = checkpoint.student
    input_dim = student.encoder.input_dim

    seen = set()
    for bag in bags:
        if bag.bag_id in seen:
            raise ValueError(f"Duplicate bag id '{bag.bag_id}'")
        seen.add(bag.bag_id)
        if not bag.patches:
            raise ValueError(f"Bag '{bag.bag_id}' has no patches")
        size = bag.patches[0].flatten().shape[0]
        if size != input_dim:
            raise ShapeMismatchError(
                f"extract (checkpoint D={student.embed_dim} expects {input_dim} inputs)",
                (size,),
                (input_dim,),
            )

    def extract_bag(bag: BagRecord) -> BagDistributions:
        with ad.no_grad():
            dist = estimate_distribution(
                student.encoder, student.heads, np.stack([p.flatten() for p in bag.patches])
            )
        mu, sigma = dist.as_arrays()
        return BagDistributions(bag.bag_id, int(bag.label), _f32(mu), _f32(sigma))

    records = ordered_map(extract_bag, bags, threads, desc="Extracting" if len(bags) > 1 else None)
    store = PrsStore(_f32(student.mask.values()), OrderedDict((r.bag_id, r) for r in records))
    logger.info(f"Extracted {sum(r.count for r in records)} patch distributions from {len(records)} bags")
    return store


def store_to_bytes(store: PrsStore) -> bytes:
    parts = [
        STORE_MAGIC,
        struct.pack("<III", store.version, store.dim, store.num_operators),
        np.ascontiguousarray(store.mask, dtype="<f4").tobytes(),
        struct.pack("<I", len(store.bags)),
    ]
    for record in store.bags.values():
        encoded = record.bag_id.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", record.label, record.count))
        interleaved = np.concatenate([record.mu, record.sigma], axis=1)
        parts.append(np.ascontiguousarray(interleaved, dtype="<f4").tobytes())
    return append_crc(b"".join(parts))


def persist(store: PrsStore, path: Union[str, Path]) -> Path:
    """Write ``store`` to ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(store_to_bytes(store))
    except OSError as e:
        logger.error(f"Failed to write store {path}: {e}")
        raise
    logger.info(f"Wrote store with {len(store)} bags to {path}")
    return path


def store_from_buffer(data: Union[bytes, memoryview, np.ndarray]) -> PrsStore:
    """Parse a store; fails closed with the offending byte offset."""
    buffer = memoryview(data).cast("B") if not isinstance(data, bytes) else data
    reader = ByteReader(buffer)
    magic = bytes(reader.take(4, "magic"))
    if magic != STORE_MAGIC:
        raise StoreFormatError(f"Bad magic {magic!r}, expected {STORE_MAGIC!r}", 0)
    version = reader.u32("version")
    if version != STORE_VERSION:
        raise StoreFormatError(f"Unsupported store version {version}", 4)
    payload = verify_crc(buffer, StoreFormatError)

    reader = ByteReader(payload)
    reader.take(8, "header")
    dim = reader.u32("D")
    num_operators = reader.u32("K")
    mask = reader.array("<f4", num_operators * dim, "mask").reshape(num_operators, dim)

    bags: "OrderedDict[str, BagDistributions]" = OrderedDict()
    for index in range(reader.u32("bag count")):
        start = reader.offset
        bag_id = reader.text(reader.u16(f"bag {index} id length"), f"bag {index} id")
        if bag_id in bags:
            raise StoreFormatError(f"Duplicate bag id '{bag_id}'", start)
        label = reader.u32(f"bag '{bag_id}' label")
        count = reader.u32(f"bag '{bag_id}' patch count")
        values = reader.array("<f4", count * 2 * dim, f"bag '{bag_id}' patches")
        values = values.reshape(count, 2 * dim).astype(np.float64)
        try:
            bags[bag_id] = BagDistributions(bag_id, label, values[:, :dim], values[:, dim:])
        except ValueError as e:
            raise StoreFormatError(str(e), start) from None
    if reader.remaining():
        raise StoreFormatError(f"{reader.remaining()} trailing bytes", reader.offset)
    try:
        return PrsStore(mask.astype(np.float64), bags, version)
    except ValueError as e:
        raise StoreFormatError(str(e), 12) from None


def load(path: Union[str, Path], use_mmap: bool = False) -> PrsStore:
    """Read a store file, optionally through a read-only memory map."""
    path = Path(path)
    if use_mmap and path.stat().st_size > 0:
        data = np.memmap(path, dtype=np.uint8, mode="r")
    else:
        data = path.read_bytes()
    store = store_from_buffer(data)
    logger.info(f"Loaded store {path}: {len(store)} bags, D={store.dim}, K={store.num_operators}")
    return store


def persist_and_load(store: PrsStore, path: Union[str, Path], use_mmap: bool = False) -> PrsStore:
    """Write then re-read ``store``."""
    return load(persist(store, path), use_mmap)


def prompt_mask_rows(store: PrsStore, prompts: Sequence[Prompt]) -> np.ndarray:
    """m_p for each prompt, shape (len(prompts), D)."""
    rows = np.stack([validate_bits(p.bits, store.num_operators) for p in prompts])
    return (rows / rows.sum(axis=1, keepdims=True)) @ store.mask


def sample_bag(
    store: PrsStore,
    bag_id: str,
    prompts: Optional[PromptSpec],
    rng: np.random.Generator,
    prompted: bool = True,
    noise_scale: float = 1.0,
) -> BagRepresentations:
    """
    Draw z_i = mu_i + sigma_p,i * eps_i for every patch of a bag.

    Args:
        store: Representation store
        bag_id: Bag identifier
        prompts: One prompt for the bag or one per patch (ignored when
            ``prompted`` is False)
        rng: Source of the per-patch noise
        prompted: Scale sigma by the prompt's mask; False samples with raw sigma
        noise_scale: Multiplier on the noise; 0 returns the means

    Returns:
        BagRepresentations with one sampled row per patch
    """
    record = store.bag(bag_id)
    if prompted:
        if prompts is None:
            raise InvalidPromptError("Prompted sampling needs a prompt")
        if isinstance(prompts, Prompt):
            masks = prompt_mask_rows(store, [prompts])
        else:
            if len(prompts) != record.count:
                raise ShapeMismatchError("sample_bag prompts", (len(prompts),), (record.count,))
            masks = prompt_mask_rows(store, prompts)
        sigma = record.sigma * masks
    else:
        sigma = record.sigma
    eps = rng.standard_normal(record.mu.shape)
    return BagRepresentations(bag_id, record.mu + sigma * (noise_scale * eps))


def mean_bag(store: PrsStore, bag_id: str) -> BagRepresentations:
    """Inference path: the stored means, unchanged."""
    return BagRepresentations(bag_id, np.array(store.bag(bag_id).mu))


class PrsSampler:
    """Reproducible sampler whose stream depends only on (seed, bag id, counter)."""

    def __init__(
        self,
        store: PrsStore,
        seed: int,
        prompted: bool = True,
        noise_scale: float = 1.0,
    ):
        self.store = store
        self.seed = seed
        self.prompted = prompted
        self.noise_scale = noise_scale

    def rng_for(self, bag_id: str, counter: int) -> np.random.Generator:
        return derive_rng(self.seed, "prs", bag_id, counter)

    def sample(
        self,
        bag_id: str,
        counter: int,
        prompts: Optional[PromptSpec] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> BagRepresentations:
        rng = self.rng_for(bag_id, counter) if rng is None else rng
        return sample_bag(
            self.store, bag_id, prompts, rng, self.prompted, self.noise_scale
        )
