"""
Synthetic Bag Benchmark

Class-conditional texture patches grouped into labelled bags, a stratified
train/val/test split, dataset directory I/O (PPM patches plus CSV tables)
and a linear-probe self-check of class separability.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .config import DataConfig
from .models.bag import BagRecord, SyntheticDataset
from .models.image import ToyImage

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
QUANT = 255.0


@dataclass(frozen=True)
class TextureSpec:
    """Base colour plus an oriented sinusoid, with its own pixel noise."""

    base_color: Tuple[float, float, float]
    frequency: float
    angle: float
    amplitude: float
    noise_level: float = 0.0


def class_textures(
    num_classes: int, rng: np.random.Generator, noise_level: float = 0.0
) -> List[TextureSpec]:
    """
    Texture 0 is the background shared by every bag; texture c marks class c.

    Class textures draw their noise from [0.5, 1.5] times ``noise_level``;
    the background keeps ``noise_level`` itself.
    """
    textures = [TextureSpec((0.5, 0.5, 0.5), 1.0, 0.0, 0.05, noise_level)]
    hues = np.linspace(0.0, 1.0, num_classes, endpoint=False)
    for c in range(1, num_classes):
        color = 0.5 + 0.3 * np.cos(2 * np.pi * (hues[c] + np.array([0.0, 1 / 3, 2 / 3])))
        textures.append(
            TextureSpec(
                base_color=tuple(float(v) for v in color),
                frequency=float(2.0 + c + rng.uniform(0.0, 0.5)),
                angle=float(rng.uniform(0.0, np.pi)),
                amplitude=0.2,
                noise_level=float(noise_level * rng.uniform(0.5, 1.5)),
            )
        )
    return textures


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap to 8-bit levels."""
    return np.round(np.clip(pixels, 0.0, 1.0) * QUANT) / QUANT


def render_patch(texture: TextureSpec, size: int, rng: np.random.Generator) -> ToyImage:
    ys, xs = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0.0, 2 * np.pi)
    direction = xs * np.cos(texture.angle) + ys * np.sin(texture.angle)
    wave = texture.amplitude * np.sin(2 * np.pi * texture.frequency * direction + phase)
    pixels = np.asarray(texture.base_color)[None, None, :] + wave[:, :, None]
    pixels = pixels + rng.normal(0.0, texture.noise_level, size=(size, size, 3))
    return ToyImage(quantize(pixels))


def _split_counts(n: int, ratio: Sequence[int]) -> Tuple[int, int, int]:
    total = sum(ratio)
    val = n * ratio[1] // total
    test = n * ratio[2] // total
    return n - val - test, val, test


def gen_synthetic(cfg: DataConfig, rng: np.random.Generator) -> SyntheticDataset:
    """
    Generate labelled bags split stratified by class.

    Args:
        cfg: Data configuration (validated)
        rng: Generator; the whole dataset is a function of its state

    Returns:
        SyntheticDataset with train/val/test bags
    """
    if not 0.0 < cfg.positive_fraction <= 1.0:
        raise ValueError(f"positive_fraction must be in (0, 1], got {cfg.positive_fraction}")
    textures = class_textures(cfg.num_classes, rng, cfg.noise_level)
    n = cfg.patches_per_bag
    n_positive = max(1, int(round(cfg.positive_fraction * n)))

    splits: Dict[str, List[BagRecord]] = {name: [] for name in SPLIT_NAMES}
    index = 0
    for label in range(cfg.num_classes):
        bags = []
        for _ in range(cfg.bags_per_class):
            positive = np.zeros(n, dtype=bool)
            if label > 0:
                positive[rng.permutation(n)[:n_positive]] = True
            patches = [
                render_patch(textures[label if flag else 0], cfg.image_size, rng)
                for flag in positive
            ]
            bags.append(BagRecord(f"bag_{index:04d}", label, patches, positive.tolist()))
            index += 1
        order = rng.permutation(len(bags))
        n_train, n_val, _ = _split_counts(len(bags), cfg.split_ratio)
        splits["train"].extend(bags[i] for i in order[:n_train])
        splits["val"].extend(bags[i] for i in order[n_train : n_train + n_val])
        splits["test"].extend(bags[i] for i in order[n_train + n_val :])

    if cfg.test_noise > 0:
        for bag in splits["test"]:
            bag.patches = [
                ToyImage(quantize(p.pixels + rng.normal(0.0, cfg.test_noise, p.pixels.shape)))
                for p in bag.patches
            ]
    for name in SPLIT_NAMES:
        splits[name].sort(key=lambda bag: bag.bag_id)
    dataset = SyntheticDataset(**splits)
    logger.info(
        f"Generated {index} bags: "
        + ", ".join(f"{name}={len(bags)}" for name, bags in dataset.splits().items())
    )
    return dataset


def pretrain_images(
    dataset: SyntheticDataset, max_images: int, rng: np.random.Generator
) -> List[ToyImage]:
    """Training-split patches, subsampled to at most ``max_images``."""
    patches = [patch for bag in dataset.train for patch in bag.patches]
    if len(patches) > max_images:
        keep = np.sort(rng.choice(len(patches), size=max_images, replace=False))
        patches = [patches[i] for i in keep]
    return patches


def linear_probe_accuracy(dataset: SyntheticDataset, ridge: float = 1.0) -> float:
    """Ridge one-vs-rest probe on bag-mean raw pixels: fit on train, score on test."""
    if not dataset.train or not dataset.test:
        raise ValueError("Linear probe needs non-empty train and test splits")

    def features(bags: Sequence[BagRecord]) -> np.ndarray:
        means = np.stack([np.mean([p.flatten() for p in bag.patches], axis=0) for bag in bags])
        return np.hstack([means, np.ones((len(bags), 1))])

    labels = np.array([bag.label for bag in dataset.train])
    num_classes = int(max(b.label for b in dataset.all_bags())) + 1
    targets = np.eye(num_classes)[labels] * 2.0 - 1.0
    x_train = features(dataset.train)
    weights = np.linalg.solve(
        x_train.T @ x_train + ridge * np.eye(x_train.shape[1]), x_train.T @ targets
    )
    predictions = np.argmax(features(dataset.test) @ weights, axis=1)
    truth = np.array([bag.label for bag in dataset.test])
    return float(np.mean(predictions == truth))


def write_dataset(dataset: SyntheticDataset, out_dir: Union[str, Path]) -> Path:
    """Write ``bags/<bag_id>/<patch_idx>.ppm``, ``labels.csv`` and ``splits.csv``."""
    out_dir = Path(out_dir)
    bags_dir = out_dir / "bags"
    bags_dir.mkdir(parents=True, exist_ok=True)
    split_of = dataset.split_of()
    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as labels_file, open(
        out_dir / "splits.csv", "w", newline="", encoding="utf-8"
    ) as splits_file:
        labels_writer = csv.writer(labels_file)
        splits_writer = csv.writer(splits_file)
        labels_writer.writerow(["bag_id", "label"])
        splits_writer.writerow(["bag_id", "split"])
        for bag in sorted(dataset.all_bags(), key=lambda b: b.bag_id):
            bag_dir = bags_dir / bag.bag_id
            bag_dir.mkdir(exist_ok=True)
            for index, patch in enumerate(bag.patches):
                pixels = np.round(patch.pixels * QUANT).astype(np.uint8)
                Image.fromarray(pixels).save(bag_dir / f"{index}.ppm", format="PPM")
            labels_writer.writerow([bag.bag_id, bag.label])
            splits_writer.writerow([bag.bag_id, split_of[bag.bag_id]])
    logger.info(f"Wrote {len(split_of)} bags to {out_dir}")
    return out_dir


def _read_table(path: Path, value_column: str) -> Dict[str, str]:
    if not path.exists():
        raise FileNotFoundError(f"Missing dataset table: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "bag_id" not in reader.fieldnames or value_column not in reader.fieldnames:
            raise ValueError(f"{path} must have columns bag_id,{value_column}")
        return {row["bag_id"]: row[value_column] for row in reader}


def read_bag(bag_dir: Path, bag_id: str, label: int) -> BagRecord:
    files = sorted(bag_dir.glob("*.ppm"), key=lambda p: int(p.stem))
    if not files:
        raise FileNotFoundError(f"No patches found for bag '{bag_id}' in {bag_dir}")
    patches = []
    for path in files:
        with Image.open(path) as img:
            patches.append(ToyImage(np.asarray(img.convert("RGB"), dtype=np.float64) / QUANT))
    return BagRecord(bag_id, label, patches)


def read_splits(data_dir: Union[str, Path]) -> Dict[str, List[str]]:
    """Bag ids per split from ``labels.csv`` and ``splits.csv``, sorted."""
    data_dir = Path(data_dir)
    labels = _read_table(data_dir / "labels.csv", "label")
    split_table = _read_table(data_dir / "splits.csv", "split")
    splits: Dict[str, List[str]] = {name: [] for name in SPLIT_NAMES}
    for bag_id in sorted(labels):
        split = split_table.get(bag_id)
        if split not in splits:
            raise ValueError(f"Bag '{bag_id}' has no valid split in splits.csv (got {split!r})")
        splits[split].append(bag_id)
    return splits


def read_dataset(data_dir: Union[str, Path]) -> SyntheticDataset:
    """Load a dataset directory written by ``write_dataset``."""
    data_dir = Path(data_dir)
    labels = _read_table(data_dir / "labels.csv", "label")
    splits: Dict[str, List[BagRecord]] = {name: [] for name in SPLIT_NAMES}
    for name, bag_ids in read_splits(data_dir).items():
        for bag_id in bag_ids:
            splits[name].append(read_bag(data_dir / "bags" / bag_id, bag_id, int(labels[bag_id])))
    dataset = SyntheticDataset(**splits)
    logger.info(f"Read {len(labels)} bags from {data_dir}")
    return dataset
