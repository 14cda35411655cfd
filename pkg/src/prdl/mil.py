"""
Attention MIL Bench

Attention-pooling bag classifier over stored patch representations,
training with PRS or baseline feature augmentation, mean-based evaluation
and model persistence.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .augment import sample_prompt
from .autodiff import Tensor
from .config import AUG_MODES, MilConfig, StoreConfig
from .errors import (
    CheckpointFormatError,
    DomainError,
    MetricError,
    MissingLabelError,
    ShapeMismatchError,
)
from .losses import cross_entropy
from .metrics import classification_metrics
from .models.bag import BagRepresentations
from .models.prompt import Prompt
from .models.results import EvaluationMetrics
from .store import PrsSampler, PrsStore, mean_bag
from .trainer import apply_gradients
from .utils.blobs import read_blob_file, write_blob_file
from .utils.parallel import ordered_map
from .utils.seeding import derive_rng

logger = logging.getLogger(__name__)

MIL_MAGIC = b"PMIL"
MIL_VERSION = 1
BASELINE_MODES = ("none", "random-perturb", "mc-discard")

BagInput = Union[BagRepresentations, np.ndarray]
Splits = Mapping[str, Sequence[str]]


@dataclass
class MilModel:
    """
    Attention-MIL head.

    ``attention`` (D x h) and ``score`` (h x 1) produce per-patch attention
    logits; ``weight`` (D x C) and ``bias`` (C) classify the pooled bag
    embedding.
    """

    attention: Tensor
    score: Tensor
    weight: Tensor
    bias: Tensor
    best_epoch: int = -1

    @classmethod
    def build(
        cls, dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator
    ) -> "MilModel":
        return cls(
            attention=ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, hidden_dim)), "V"),
            score=ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (hidden_dim, 1)), "w"),
            weight=ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, num_classes)), "W"),
            bias=ad.parameter(np.zeros(num_classes), "b"),
        )

    @property
    def dim(self) -> int:
        return int(self.attention.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.attention.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.weight.shape[1])

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            [("V", self.attention), ("w", self.score), ("W", self.weight), ("b", self.bias)]
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_parameters().items()}

    def restore(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, param in self.named_parameters().items():
            param.assign_(arrays[name])


def _bag_values(bag: BagInput) -> np.ndarray:
    return bag.values if isinstance(bag, BagRepresentations) else np.asarray(bag, dtype=np.float64)


def attention_pool(model: MilModel, bag: BagInput) -> Tuple[Tensor, Tensor]:
    """
    Pool a bag with attention and classify it.

    a_i = softmax_i(w^T tanh(V z_i)); the bag embedding is sum_i a_i z_i.

    Args:
        model: MIL head
        bag: n x D patch representations

    Returns:
        (class logits of shape (C,), attention weights of shape (n,))
    """
    values = _bag_values(bag)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ShapeMismatchError("attention_pool (non-empty bag required)", values.shape, ("n>=1", model.dim))
    if values.shape[1] != model.dim:
        raise ShapeMismatchError("attention_pool", values.shape, ("n", model.dim))
    z = Tensor(values)
    scores = ad.tanh(z @ model.attention) @ model.score
    weights = ad.softmax(scores, axis=0)
    embedding = weights.T @ z
    logits = embedding @ model.weight + model.bias
    return logits.reshape(model.num_classes), weights.reshape(values.shape[0])


def baseline_augment(
    bag: BagInput,
    mode: str,
    params: MilConfig,
    rng: np.random.Generator,
) -> BagInput:
    """
    Feature-level baseline augmentation of a bag.

    Args:
        bag: n x D patch representations
        mode: ``none``, ``random-perturb`` (add N(0, s^2) noise) or
            ``mc-discard`` (keep each patch with probability q, at least one)
        params: Supplies ``perturb_scale`` (s) and ``keep_prob`` (q)
        rng: Noise source

    Returns:
        Augmented bag of the same kind as ``bag``
    """
    if mode not in BASELINE_MODES:
        raise ValueError(f"Unknown baseline mode '{mode}', expected one of {', '.join(BASELINE_MODES)}")
    values = _bag_values(bag)
    if mode == "random-perturb":
        values = values + rng.normal(0.0, params.perturb_scale, values.shape)
    elif mode == "mc-discard":
        q = params.keep_prob
        if not 0.0 < q <= 1.0:
            raise DomainError(f"keep probability must be in (0, 1], got {q}")
        keep = rng.random(values.shape[0]) < q
        while not keep.any():
            keep = rng.random(values.shape[0]) < q
        values = values[keep]
    if isinstance(bag, BagRepresentations):
        return BagRepresentations(bag.bag_id, values)
    return values


def _resolve_labels(
    store: PrsStore, bag_ids: Sequence[str], labels: Optional[Mapping[str, int]]
) -> np.ndarray:
    table = store.labels() if labels is None else labels
    missing = [bag_id for bag_id in bag_ids if bag_id not in table]
    if missing:
        raise MissingLabelError(missing[0])
    return np.array([int(table[bag_id]) for bag_id in bag_ids], dtype=int)


class BagFeeder:
    """Chooses the training representation of a bag for one visit."""

    def __init__(
        self,
        store: PrsStore,
        mode: str,
        cfg: MilConfig,
        store_cfg: StoreConfig,
        seed: int,
    ):
        if mode not in AUG_MODES:
            raise ValueError(f"Unknown augmentation '{mode}', expected one of {', '.join(AUG_MODES)}")
        self.store = store
        self.mode = mode
        self.cfg = cfg
        self.seed = seed
        self.sampler = PrsSampler(
            store,
            seed,
            prompted=mode == "prs" and store_cfg.prompted_sampling,
            noise_scale=store_cfg.noise_scale,
        )
        self.fixed_prompt = Prompt.from_operators(cfg.prompt_ops) if cfg.prompt_ops else None

    def prompts_for(self, bag_id: str, counter: int) -> Union[Prompt, List[Prompt]]:
        if self.fixed_prompt is not None:
            return self.fixed_prompt
        rng = derive_rng(self.seed, "mil-prompt", bag_id, counter)
        if self.cfg.per_patch_prompts:
            return [sample_prompt(rng) for _ in range(self.store.bag(bag_id).count)]
        return sample_prompt(rng)

    def __call__(self, bag_id: str, counter: int) -> BagRepresentations:
        if self.mode in ("prs", "prs-raw"):
            prompts = self.prompts_for(bag_id, counter) if self.sampler.prompted else None
            return self.sampler.sample(bag_id, counter, prompts)
        bag = mean_bag(self.store, bag_id)
        if self.mode == "none":
            return bag
        rng = derive_rng(self.seed, "mil-aug", bag_id, counter)
        return baseline_augment(bag, self.mode, self.cfg, rng)


def bag_loss(model: MilModel, bag: BagInput, label: int) -> Tensor:
    logits, _ = attention_pool(model, bag)
    target = np.eye(model.num_classes)[label]
    return cross_entropy(target, ad.softmax(logits))


def predict_scores(model: MilModel, store: PrsStore, bag_ids: Sequence[str], threads: int = 1) -> np.ndarray:
    """Class probabilities per bag from the stored means (no sampling)."""

    def score(bag_id: str) -> np.ndarray:
        with ad.no_grad():
            logits, _ = attention_pool(model, mean_bag(store, bag_id))
            return ad.softmax(logits).numpy()

    return np.stack(ordered_map(score, bag_ids, threads))


def evaluate(
    model: MilModel,
    store: PrsStore,
    bag_ids: Sequence[str],
    labels: Optional[Mapping[str, int]] = None,
    threads: int = 1,
) -> EvaluationMetrics:
    """
    Score a split with mean representations.

    Args:
        model: Trained MIL head
        store: Representation store
        bag_ids: Bags of the split
        labels: Label override; defaults to the store's labels
        threads: Workers for per-bag inference

    Returns:
        EvaluationMetrics (micro-AUC, macro-F1, accuracy)
    """
    if not bag_ids:
        raise MetricError("Cannot evaluate an empty split")
    truth = _resolve_labels(store, bag_ids, labels)
    return classification_metrics(truth, predict_scores(model, store, bag_ids, threads))


def train_mil(
    store: PrsStore,
    splits: Splits,
    cfg: MilConfig,
    aug_mode: Optional[str] = None,
    seed: int = 0,
    store_cfg: Optional[StoreConfig] = None,
    labels: Optional[Mapping[str, int]] = None,
) -> MilModel:
    """
    Train an attention-MIL head one bag at a time.

    Args:
        store: Representation store
        splits: ``train`` and ``val`` bag id lists
        cfg: MIL configuration
        aug_mode: Overrides ``cfg.aug``
        seed: Root seed for initialization, ordering and sampling
        store_cfg: Sampling switches (prompted, noise scale)
        labels: Label override; defaults to the store's labels

    Returns:
        MilModel restored to its best validation epoch
    """
    mode = cfg.aug if aug_mode is None else aug_mode
    store_cfg = store_cfg or StoreConfig()
    train_ids = list(splits.get("train", []))
    val_ids = list(splits.get("val", []))
    if not train_ids:
        raise ValueError("MIL training needs a non-empty train split")
    train_labels = _resolve_labels(store, train_ids, labels)
    all_labels = store.labels() if labels is None else labels
    num_classes = max(int(v) for v in all_labels.values()) + 1
    if num_classes < 2:
        raise ValueError("MIL training needs at least two classes")

    feeder = BagFeeder(store, mode, cfg, store_cfg, seed)
    model = MilModel.build(store.dim, cfg.hidden_dim, num_classes, derive_rng(seed, "mil-init"))
    params = list(model.named_parameters().values())
    logger.info(f"Training MIL head (aug={mode}, D={store.dim}, classes={num_classes}, bags={len(train_ids)})")

    best_key: Optional[Tuple[float, float]] = None
    best = model.snapshot()
    step = 0
    for epoch in tqdm(range(cfg.epochs), desc=f"MIL [{mode}]", leave=False):
        order = derive_rng(seed, "mil-order", epoch).permutation(len(train_ids))
        total = 0.0
        for index in order:
            counter = epoch if cfg.resample == "epoch" else step
            bag = feeder(train_ids[index], counter)
            loss = bag_loss(model, bag, int(train_labels[index]))
            loss.backward()
            apply_gradients(params, cfg.lr)
            total += loss.item()
            step += 1

        if val_ids:
            try:
                metrics = evaluate(model, store, val_ids, labels)
                key = (metrics.auc, metrics.accuracy)
            except MetricError as e:
                logger.warning(f"MIL epoch {epoch}: validation metrics unavailable ({e}); keeping the latest epoch")
                metrics = None
                key = (float("-inf"), float(epoch))
            if best_key is None or key > best_key:
                best_key, best = key, model.snapshot()
                model.best_epoch = epoch
            logger.debug(
                f"MIL epoch {epoch}: train loss {total / len(train_ids):.4f}"
                + (f", val {metrics.to_dict()}" if metrics else "")
            )
        else:
            best, model.best_epoch = model.snapshot(), epoch

    model.restore(best)
    logger.info(f"MIL training finished; best epoch {model.best_epoch}")
    return model


def compare_augmentations(
    store: PrsStore,
    splits: Splits,
    cfg: MilConfig,
    modes: Sequence[str],
    seeds: Sequence[int],
    split: str = "test",
    store_cfg: Optional[StoreConfig] = None,
) -> List[Dict[str, Union[str, int, float]]]:
    """Train and evaluate every (mode, seed); one metrics row each."""
    rows = []
    for mode in modes:
        for seed in seeds:
            model = train_mil(store, splits, cfg, mode, seed, store_cfg)
            metrics = evaluate(model, store, list(splits[split]))
            rows.append({"method": mode, "seed": seed, "split": split, **metrics.to_dict()})
    return rows


def save_mil_model(model: MilModel, path: Union[str, Path]) -> Path:
    """Persist with the named-blob container, magic "PMIL", header (D, h, C)."""
    blobs = OrderedDict(model.snapshot())
    blobs["best_epoch"] = np.array([model.best_epoch], dtype=np.float64)
    path = write_blob_file(
        path, MIL_MAGIC, MIL_VERSION, (model.dim, model.hidden_dim, model.num_classes), blobs
    )
    logger.info(f"Saved MIL model to {path}")
    return path


def load_mil_model(path: Union[str, Path]) -> MilModel:
    (dim, hidden_dim, num_classes), blobs = read_blob_file(path, MIL_MAGIC, MIL_VERSION, 3)
    expected = {"V": (dim, hidden_dim), "w": (hidden_dim, 1), "W": (dim, num_classes), "b": (num_classes,)}
    for name, shape in expected.items():
        if name not in blobs:
            raise CheckpointFormatError(f"Missing blob '{name}'", 0)
        if blobs[name].shape != shape:
            raise CheckpointFormatError(
                f"Blob '{name}' has shape {blobs[name].shape}, header implies {shape}", 0
            )
    model = MilModel(
        attention=ad.parameter(blobs["V"], "V"),
        score=ad.parameter(blobs["w"], "w"),
        weight=ad.parameter(blobs["W"], "W"),
        bias=ad.parameter(blobs["b"], "b"),
        best_epoch=int(blobs["best_epoch"][0]) if "best_epoch" in blobs else -1,
    )
    logger.info(f"Loaded MIL model from {path}")
    return model
