"""
Run configuration.

One dataclass per section, grouped in ``RunConfig``. Files are JSON or YAML
(read with ``yaml.safe_load``); every field is optional and unknown keys are
rejected with their dotted path.
"""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from .errors import ConfigError
from .models.prompt import operator_index

logger = logging.getLogger(__name__)

AUG_MODES = ("none", "prs", "prs-raw", "random-perturb", "mc-discard")
RESAMPLE_MODES = ("epoch", "step")
KL_DIRECTIONS = ("literal", "conventional")
ACTIVATIONS = ("relu", "tanh")


def _require(condition: bool, key_path: str, message: str) -> None:
    if not condition:
        raise ConfigError(key_path, message)


@dataclass
class DataConfig:
    """Synthetic bag benchmark."""

    num_classes: int = 2
    bags_per_class: int = 50
    patches_per_bag: int = 16
    positive_fraction: float = 0.5
    image_size: int = 16
    noise_level: float = 0.08
    test_noise: float = 0.0
    split_ratio: Tuple[int, int, int] = (6, 1, 3)

    def validate(self, prefix: str = "data") -> None:
        _require(self.num_classes >= 2, f"{prefix}.num_classes", "must be >= 2")
        _require(self.bags_per_class >= 1, f"{prefix}.bags_per_class", "must be >= 1")
        _require(self.patches_per_bag >= 1, f"{prefix}.patches_per_bag", "must be >= 1")
        _require(
            0.0 < self.positive_fraction <= 1.0,
            f"{prefix}.positive_fraction",
            f"must be in (0, 1], got {self.positive_fraction}",
        )
        _require(self.image_size >= 4, f"{prefix}.image_size", "must be >= 4")
        _require(self.noise_level >= 0, f"{prefix}.noise_level", "must be >= 0")
        _require(self.test_noise >= 0, f"{prefix}.test_noise", "must be >= 0")
        _require(
            len(self.split_ratio) == 3 and all(r >= 0 for r in self.split_ratio) and sum(self.split_ratio) > 0,
            f"{prefix}.split_ratio",
            "must be three non-negative integers with a positive sum",
        )


@dataclass
class ModelConfig:
    """Network dimensions."""

    image_size: int = 16
    local_size: int = 8
    embed_dim: int = 32
    hidden_dims: Tuple[int, ...] = (128, 128)
    projector_hidden: int = 64
    out_dim: int = 64
    head_depth: int = 1
    activation: str = "relu"
    mask_init_std: float = 1.0

    @property
    def input_dim(self) -> int:
        return 3 * self.image_size * self.image_size

    def validate(self, prefix: str = "model") -> None:
        _require(self.image_size >= 4, f"{prefix}.image_size", "must be >= 4")
        _require(
            1 <= self.local_size <= self.image_size,
            f"{prefix}.local_size",
            "must be in [1, image_size]",
        )
        _require(self.embed_dim >= 2, f"{prefix}.embed_dim", "must be >= 2")
        _require(all(h >= 1 for h in self.hidden_dims), f"{prefix}.hidden_dims", "must be positive")
        _require(self.projector_hidden >= 1, f"{prefix}.projector_hidden", "must be >= 1")
        _require(self.out_dim >= 2, f"{prefix}.out_dim", "must be >= 2")
        _require(self.head_depth >= 1, f"{prefix}.head_depth", "must be >= 1")
        _require(
            self.activation in ACTIVATIONS,
            f"{prefix}.activation",
            f"must be one of {', '.join(ACTIVATIONS)}",
        )
        _require(self.mask_init_std > 0, f"{prefix}.mask_init_std", "must be > 0")


@dataclass
class AugmentConfig:
    """Pre-augmentation and view composition."""

    global_scale: Tuple[float, float] = (0.4, 1.0)
    local_scale: Tuple[float, float] = (0.05, 0.4)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: Tuple[float, float, float, float] = (0.4, 0.4, 0.2, 0.1)
    grayscale_prob: float = 0.2
    blur_sigma: Tuple[float, float] = (0.1, 2.0)
    bit_prob: float = 0.5

    def validate(self, prefix: str = "pretrain.augment") -> None:
        for name in ("global_scale", "local_scale", "blur_sigma"):
            low, high = getattr(self, name)
            _require(0 < low <= high, f"{prefix}.{name}", f"must satisfy 0 < low <= high, got {(low, high)}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            value = getattr(self, name)
            _require(0.0 <= value <= 1.0, f"{prefix}.{name}", f"must be in [0, 1], got {value}")
        _require(0.0 < self.bit_prob <= 1.0, f"{prefix}.bit_prob", "must be in (0, 1]")
        _require(all(s >= 0 for s in self.jitter_strength), f"{prefix}.jitter_strength", "must be >= 0")


@dataclass
class TrainConfig:
    """Pretraining schedule and ablation switches."""

    batch_size: int = 32
    epochs: int = 20
    lr_reference: float = 0.0005
    warmup_steps: int = 10
    min_lr: float = 1e-6
    ema_start: float = 0.996
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: int = 10
    n_local: int = 4
    max_images: int = 512
    grad_clip: Optional[float] = 3.0
    use_representation_branch: bool = True
    sample_noise: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def base_lr(self) -> float:
        """Linear scaling rule: lr_reference * batch_size / 256."""
        return self.lr_reference * self.batch_size / 256.0

    def validate(self, prefix: str = "pretrain") -> None:
        _require(self.batch_size >= 1, f"{prefix}.batch_size", "must be >= 1")
        _require(self.epochs >= 1, f"{prefix}.epochs", "must be >= 1")
        _require(self.lr_reference >= 0, f"{prefix}.lr_reference", "must be >= 0")
        _require(self.warmup_steps >= 0, f"{prefix}.warmup_steps", "must be >= 0")
        _require(self.min_lr >= 0, f"{prefix}.min_lr", "must be >= 0")
        _require(0.0 <= self.ema_start <= 1.0, f"{prefix}.ema_start", "must be in [0, 1]")
        _require(self.teacher_temp_start > 0, f"{prefix}.teacher_temp_start", "must be > 0")
        _require(self.teacher_temp_end > 0, f"{prefix}.teacher_temp_end", "must be > 0")
        _require(self.teacher_temp_warmup_epochs >= 0, f"{prefix}.teacher_temp_warmup_epochs", "must be >= 0")
        _require(self.n_local >= 0, f"{prefix}.n_local", "must be >= 0")
        _require(self.max_images >= 1, f"{prefix}.max_images", "must be >= 1")
        _require(self.grad_clip is None or self.grad_clip > 0, f"{prefix}.grad_clip", "must be > 0 or null")
        self.augment.validate(f"{prefix}.augment")


@dataclass
class LossConfig:
    """Temperatures, term weights and regularizer constants."""

    student_temp: float = 0.1
    sample_temp: float = 1.0
    beta_kl: float = 0.001
    beta_sparsity: float = 0.001
    beta_variance: float = 1.0
    gamma: float = 1e-4
    kl_direction: str = "literal"
    centering: bool = True
    center_momentum: float = 0.9

    def validate(self, prefix: str = "loss") -> None:
        _require(self.student_temp > 0, f"{prefix}.student_temp", "must be > 0")
        _require(self.sample_temp > 0, f"{prefix}.sample_temp", "must be > 0")
        for name in ("beta_kl", "beta_sparsity", "beta_variance"):
            _require(getattr(self, name) >= 0, f"{prefix}.{name}", "must be >= 0")
        _require(self.gamma > 0, f"{prefix}.gamma", "must be > 0")
        _require(
            self.kl_direction in KL_DIRECTIONS,
            f"{prefix}.kl_direction",
            f"must be one of {', '.join(KL_DIRECTIONS)}",
        )
        _require(0.0 <= self.center_momentum <= 1.0, f"{prefix}.center_momentum", "must be in [0, 1]")


@dataclass
class StoreConfig:
    """Representation store extraction and sampling."""

    prompted_sampling: bool = True
    noise_scale: float = 1.0
    use_mmap: bool = False

    def validate(self, prefix: str = "store") -> None:
        _require(self.noise_scale >= 0, f"{prefix}.noise_scale", "must be >= 0")


@dataclass
class MilConfig:
    """Attention-MIL training."""

    hidden_dim: int = 32
    epochs: int = 50
    lr: float = 0.05
    aug: str = "none"
    perturb_scale: float = 1.0
    keep_prob: float = 0.8
    per_patch_prompts: bool = False
    resample: str = "epoch"
    prompt_ops: List[str] = field(default_factory=list)

    def validate(self, prefix: str = "mil") -> None:
        _require(self.hidden_dim >= 1, f"{prefix}.hidden_dim", "must be >= 1")
        _require(self.epochs >= 1, f"{prefix}.epochs", "must be >= 1")
        _require(self.lr > 0, f"{prefix}.lr", "must be > 0")
        _require(self.aug in AUG_MODES, f"{prefix}.aug", f"must be one of {', '.join(AUG_MODES)}")
        _require(self.perturb_scale >= 0, f"{prefix}.perturb_scale", "must be >= 0")
        _require(0.0 < self.keep_prob <= 1.0, f"{prefix}.keep_prob", "must be in (0, 1]")
        _require(
            self.resample in RESAMPLE_MODES,
            f"{prefix}.resample",
            f"must be one of {', '.join(RESAMPLE_MODES)}",
        )
        for index, name in enumerate(self.prompt_ops):
            try:
                operator_index(name)
            except ValueError as e:
                raise ConfigError(f"{prefix}.prompt_ops[{index}]", str(e)) from None


@dataclass
class RunConfig:
    """Complete run configuration."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    mil: MilConfig = field(default_factory=MilConfig)

    def validate(self) -> "RunConfig":
        _require(self.seed >= 0, "seed", "must be >= 0")
        self.data.validate("data")
        self.model.validate("model")
        self.pretrain.validate("pretrain")
        self.loss.validate("loss")
        self.store.validate("store")
        self.mil.validate("mil")
        _require(
            self.data.image_size == self.model.image_size,
            "model.image_size",
            f"must equal data.image_size ({self.data.image_size})",
        )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of the resolved config."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _type_name(expected: Any) -> str:
    return getattr(expected, "__name__", str(expected))


def _coerce(value: Any, expected: Any, key_path: str) -> Any:
    origin = get_origin(expected)
    if dataclasses.is_dataclass(expected):
        return _build(expected, value, key_path)
    if origin is Union:
        options = [arg for arg in get_args(expected) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(value, options[0], key_path)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key_path, f"expected a list, got {type(value).__name__}")
        args = get_args(expected)
        if origin is tuple and args and args[-1] is not Ellipsis and len(args) != len(value):
            raise ConfigError(key_path, f"expected {len(args)} values, got {len(value)}")
        item_type = args[0] if args else Any
        items = [_coerce(item, item_type, f"{key_path}[{i}]") for i, item in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(key_path, f"expected a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key_path, f"expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key_path, f"expected a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(key_path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(key_path, f"unsupported field type {_type_name(expected)}")


def _build(cls: Any, data: Any, prefix: str) -> Any:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key_path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(key_path, "unknown configuration key")
        kwargs[key] = _coerce(value, hints[key], key_path)
    return cls(**kwargs)


def config_from_dict(data: Optional[Mapping[str, Any]]) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def _set_path(data: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(dotted, "cannot override inside a non-mapping value")
        node = child
    node[parts[-1]] = value


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Load and validate a run configuration.

    Args:
        path: JSON or YAML file; defaults apply when omitted
        overrides: Dotted key paths (e.g. ``"mil.aug"``) taking precedence
            over file values; ``None`` values are ignored

    Returns:
        Fully resolved ``RunConfig``
    """
    data: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            try:
                loaded = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError("<root>", f"cannot parse {path}: {e}") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError("<root>", f"{path} must contain a mapping")
        data = loaded or {}
        logger.info(f"Loaded configuration from {path}")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(data, dotted, value)
    return config_from_dict(data)


def write_resolved_config(cfg: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Echo the resolved configuration to ``<out_dir>/resolved_config.json``."""
    out_path = Path(out_dir) / "resolved_config.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return out_path
