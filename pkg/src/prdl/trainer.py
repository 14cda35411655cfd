"""
PRDL Trainer

Self-distillation pretraining with the prompted representation branch:
per-image view orchestration, teacher/student/representation forward pass,
gradient descent on the student, EMA teacher update and checkpointing.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .augment import ViewAugmenter
from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import LossConfig, RunConfig
from .errors import DomainError, NonFiniteLossError
from .losses import (
    distillation_loss,
    kl_loss,
    sparsity_loss,
    total_loss,
    update_center,
    variance_loss,
)
from .models.distribution import ReprDistribution
from .models.image import ToyImage, ViewKind
from .models.results import LossBreakdown
from .network import (
    EmaState,
    StudentNetwork,
    TeacherNetwork,
    ema_update,
    encode,
    estimate_distribution,
    project_probs,
    prompted_mask,
    sample_representation,
)
from .schedules import ScheduleValues, schedule
from .utils.parallel import ordered_map
from .utils.seeding import derive_rng, draw_seed

logger = logging.getLogger(__name__)

NUM_GLOBAL_VIEWS = 2


def build_augmenter(cfg: RunConfig) -> ViewAugmenter:
    aug = cfg.pretrain.augment
    return ViewAugmenter(
        canonical_size=cfg.model.image_size,
        local_size=cfg.model.local_size,
        global_scale=aug.global_scale,
        local_scale=aug.local_scale,
        flip_prob=aug.flip_prob,
        jitter_prob=aug.jitter_prob,
        jitter_strength=aug.jitter_strength,
        grayscale_prob=aug.grayscale_prob,
        blur_sigma=aug.blur_sigma,
        bit_prob=aug.bit_prob,
    )


def build_student(cfg: RunConfig, rng: np.random.Generator) -> StudentNetwork:
    model = cfg.model
    return StudentNetwork.build(
        input_dim=model.input_dim,
        embed_dim=model.embed_dim,
        out_dim=model.out_dim,
        rng=rng,
        hidden_dims=model.hidden_dims,
        projector_hidden=model.projector_hidden,
        head_depth=model.head_depth,
        activation=model.activation,
        mask_init_std=model.mask_init_std,
    )


@dataclass
class StepInputs:
    """Flattened views for one batch; T teacher views, S = T + n_local student views."""

    anchors: np.ndarray
    global_views: np.ndarray
    local_views: np.ndarray
    teacher_prompts: np.ndarray
    eps: np.ndarray

    @property
    def batch_size(self) -> int:
        return int(self.anchors.shape[0])

    def student_views(self) -> np.ndarray:
        return np.concatenate([self.global_views, self.local_views], axis=1)


@dataclass
class ForwardResult:
    breakdown: LossBreakdown
    teacher_logits: np.ndarray
    teacher_probs: np.ndarray
    student_probs: Tensor
    sampled_probs: Optional[Tensor] = None
    distribution: Optional[ReprDistribution] = None
    prompted_masks: Optional[Tensor] = None


@dataclass
class TrainState:
    """Mutable training state; ``train_step`` updates it in place."""

    student: StudentNetwork
    ema: EmaState
    center: np.ndarray
    step: int = 0
    total_steps: int = 1
    steps_per_epoch: int = 1
    history: List[LossBreakdown] = field(default_factory=list, repr=False)

    @property
    def teacher(self) -> TeacherNetwork:
        return self.ema.teacher

    @property
    def epoch(self) -> int:
        return self.step // max(self.steps_per_epoch, 1)

    def clone(self) -> "TrainState":
        student = StudentNetwork(
            encoder=self.student.encoder.copy(True),
            projector=self.student.projector.copy(True),
            heads=type(self.student.heads)(
                mu=self.student.heads.mu.copy(True),
                log_var=self.student.heads.log_var.copy(True),
            ),
            mask=type(self.student.mask)(ad.parameter(self.student.mask.logits.data, "mask.logits")),
        )
        teacher = TeacherNetwork(
            encoder=self.teacher.encoder.copy(False),
            projector=self.teacher.projector.copy(False),
        )
        return TrainState(
            student=student,
            ema=EmaState(teacher, self.ema.momentum),
            center=np.array(self.center),
            step=self.step,
            total_steps=self.total_steps,
            steps_per_epoch=self.steps_per_epoch,
        )

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, momentum: float = 0.996) -> "TrainState":
        return cls(
            student=checkpoint.student,
            ema=EmaState(checkpoint.teacher, momentum),
            center=np.array(checkpoint.center),
            step=checkpoint.step,
        )


def _teacher_outputs(
    teacher: TeacherNetwork,
    views: np.ndarray,
    center: np.ndarray,
    temperature: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Raw logits and centered, sharpened probabilities; no gradient."""
    with ad.no_grad():
        logits = teacher.projector(encode(teacher.encoder, views)).numpy()
    probs = ad.softmax(Tensor((logits - center) / temperature), axis=-1).numpy()
    return logits, probs


def forward_losses(
    student: StudentNetwork,
    teacher: TeacherNetwork,
    inputs: StepInputs,
    center: np.ndarray,
    teacher_temp: float,
    loss_cfg: LossConfig,
    use_representation_branch: bool = True,
) -> ForwardResult:
    """
    Three-branch forward pass and loss terms for one batch.

    Args:
        student: Student network (differentiated)
        teacher: EMA teacher (constant)
        inputs: Views, prompts and noise for the batch
        center: Running teacher logit center (zeros when centering is off)
        teacher_temp: Current teacher temperature
        loss_cfg: Temperatures and term weights
        use_representation_branch: When False only multi-crop distillation runs

    Returns:
        ForwardResult whose breakdown carries the differentiable total
    """
    batch, n_teacher, input_dim = inputs.global_views.shape
    views = inputs.student_views()
    n_student = views.shape[1]

    active_center = center if loss_cfg.centering else np.zeros_like(center)
    teacher_logits, teacher_probs = _teacher_outputs(
        teacher, inputs.global_views.reshape(batch * n_teacher, input_dim), active_center, teacher_temp
    )
    out_dim = teacher_probs.shape[-1]
    teacher_probs = teacher_probs.reshape(batch, n_teacher, out_dim)

    student_z = encode(student.encoder, views.reshape(batch * n_student, input_dim))
    student_probs = project_probs(student.projector, student_z, loss_cfg.student_temp)
    student_probs = student_probs.reshape(batch, n_student, out_dim)

    if not use_representation_branch:
        ce = distillation_loss(teacher_probs, student_probs)
        breakdown = total_loss(ce, 0.0, 0.0, 0.0, loss_cfg)
        return ForwardResult(breakdown, teacher_logits, teacher_probs, student_probs)

    dist = estimate_distribution(student.encoder, student.heads, inputs.anchors)
    # one row per (image, teacher view)
    repeat = Tensor(np.repeat(np.eye(batch), n_teacher, axis=0))
    expanded = ReprDistribution(repeat @ dist.mu, repeat @ dist.sigma)
    m_p = prompted_mask(student.mask, inputs.teacher_prompts.reshape(batch * n_teacher, -1))
    sigma_p = expanded.sigma * m_p
    z_v = sample_representation(expanded, sigma_p, eps=inputs.eps.reshape(batch * n_teacher, -1))
    sampled_probs = project_probs(student.projector, z_v, loss_cfg.sample_temp)
    sampled_probs = sampled_probs.reshape(batch, n_teacher, out_dim)

    breakdown = total_loss(
        distillation_loss(teacher_probs, student_probs, sampled_probs),
        kl_loss(dist, loss_cfg.kl_direction),
        sparsity_loss(m_p),
        variance_loss(m_p, loss_cfg.gamma),
        loss_cfg,
    )
    return ForwardResult(
        breakdown,
        teacher_logits,
        teacher_probs,
        student_probs,
        sampled_probs,
        dist,
        m_p,
    )


def apply_gradients(
    params: Sequence[Tensor], lr: float, grad_clip: Optional[float] = None
) -> float:
    """Plain gradient descent with optional global-norm clipping; returns the norm."""
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    scale = 1.0
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / norm
    for param, grad in zip(params, grads):
        param.assign_(param.data - lr * scale * grad)
        param.zero_grad()
    return norm


class PRDLTrainer:
    """Runs PRDL pretraining for one configuration."""

    def __init__(self, cfg: RunConfig, threads: int = 1):
        """
        Initialize trainer.

        Args:
            cfg: Resolved run configuration
            threads: Workers for per-image view composition
        """
        self.cfg = cfg
        self.threads = threads
        self.augmenter = build_augmenter(cfg)

    def init_state(self, seed: int) -> TrainState:
        student = build_student(self.cfg, derive_rng(seed, "init"))
        teacher = TeacherNetwork.from_student(student)
        return TrainState(
            student=student,
            ema=EmaState(teacher, self.cfg.pretrain.ema_start),
            center=np.zeros(student.out_dim),
        )

    def _image_views(self, item: Tuple[ToyImage, int]) -> Tuple[np.ndarray, ...]:
        image, seed = item
        rng = derive_rng(seed)
        augmenter = self.augmenter
        anchor = augmenter.pre_augment(image, rng)
        prompts = [augmenter.sample_prompt(rng) for _ in range(NUM_GLOBAL_VIEWS)]
        globals_ = [
            augmenter.compose_view(anchor, prompt, ViewKind.GLOBAL, rng).flatten()
            for prompt in prompts
        ]
        locals_ = [
            augmenter.compose_view(
                anchor, augmenter.sample_prompt(rng), ViewKind.LOCAL, rng
            ).flatten()
            for _ in range(self.cfg.pretrain.n_local)
        ]
        shape = (NUM_GLOBAL_VIEWS, self.cfg.model.embed_dim)
        eps = rng.standard_normal(shape) if self.cfg.pretrain.sample_noise else np.zeros(shape)
        return (
            augmenter.canonical(anchor).flatten(),
            np.stack(globals_),
            np.stack(locals_) if locals_ else np.zeros((0, augmenter.input_dim)),
            np.stack([p.as_array() for p in prompts]),
            eps,
        )

    def build_inputs(self, images: Sequence[ToyImage], rng: np.random.Generator) -> StepInputs:
        """Pre-augment each image and compose its views from a per-image seed."""
        if not images:
            raise ValueError("Batch must contain at least one image")
        seeds = [draw_seed(rng) for _ in images]
        per_image = ordered_map(self._image_views, list(zip(images, seeds)), self.threads)
        anchors, globals_, locals_, prompts, eps = (np.stack(parts) for parts in zip(*per_image))
        return StepInputs(anchors, globals_, locals_, prompts, eps)

    def train_step(
        self,
        state: TrainState,
        images: Sequence[ToyImage],
        rng: np.random.Generator,
        values: Optional[ScheduleValues] = None,
    ) -> Tuple[TrainState, LossBreakdown]:
        """
        One optimization step on a batch.

        Args:
            state: Training state, updated in place
            images: Non-empty batch of images
            rng: Generator for augmentation, prompts and sampling noise
            values: Schedule values; derived from ``state.step`` when omitted

        Returns:
            Tuple of (state, LossBreakdown)
        """
        if values is None:
            values = schedule(state.step, state.epoch, self.cfg.pretrain, state.total_steps)
        inputs = self.build_inputs(images, rng)
        result = forward_losses(
            state.student,
            state.teacher,
            inputs,
            state.center,
            values.teacher_temp,
            self.cfg.loss,
            self.cfg.pretrain.use_representation_branch,
        )
        breakdown = result.breakdown
        if not breakdown.is_finite():
            logger.error(f"Non-finite loss at step {state.step}: {breakdown.to_dict()}")
            raise NonFiniteLossError(state.step, breakdown.to_dict())

        params = list(state.student.named_parameters().values())
        for param in params:
            param.zero_grad()
        breakdown.graph.backward()
        grad_norm = apply_gradients(params, values.lr, self.cfg.pretrain.grad_clip)
        breakdown.graph = None

        ema_update(state.ema, state.student, values.momentum)
        if self.cfg.loss.centering:
            state.center = update_center(
                state.center, result.teacher_logits, self.cfg.loss.center_momentum
            )
        masks = state.student.mask.values()
        if not (np.all(masks > 0.0) and np.all(masks < 1.0)):
            raise DomainError(f"Mask entries left (0, 1) at step {state.step}")

        logger.debug(
            f"step {state.step}: total={breakdown.total:.6f} lr={values.lr:.3g} "
            f"momentum={values.momentum:.6f} grad_norm={grad_norm:.4f}"
        )
        state.step += 1
        state.history.append(breakdown)
        return state, breakdown

    def probe_loss(self, state: TrainState, images: Sequence[ToyImage], seed: int) -> float:
        """Deterministic loss on a fixed probe batch; no parameter update."""
        probe = list(images[: self.cfg.pretrain.batch_size])
        inputs = self.build_inputs(probe, derive_rng(seed, "probe"))
        result = forward_losses(
            state.student,
            state.teacher,
            inputs,
            state.center,
            self.cfg.pretrain.teacher_temp_end,
            self.cfg.loss,
            self.cfg.pretrain.use_representation_branch,
        )
        return result.breakdown.total

    def fit(self, images: Sequence[ToyImage], seed: int) -> Tuple[TrainState, List[dict]]:
        """Run the full schedule; returns the final state and per-epoch rows."""
        if not images:
            raise ValueError("Pretraining dataset is empty")
        pretrain = self.cfg.pretrain
        state = self.init_state(seed)
        state.steps_per_epoch = math.ceil(len(images) / pretrain.batch_size)
        state.total_steps = pretrain.epochs * state.steps_per_epoch

        rows = []
        for epoch in tqdm(range(pretrain.epochs), desc="Pretraining", leave=False):
            order = derive_rng(seed, "shuffle", epoch).permutation(len(images))
            epoch_losses = []
            for start in range(0, len(images), pretrain.batch_size):
                batch = [images[i] for i in order[start : start + pretrain.batch_size]]
                values = schedule(state.step, epoch, pretrain, state.total_steps)
                _, breakdown = self.train_step(
                    state, batch, derive_rng(seed, "step", state.step), values
                )
                epoch_losses.append(breakdown.to_dict())

            row = {
                "epoch": epoch,
                **{key: float(np.mean([l[key] for l in epoch_losses])) for key in epoch_losses[0]},
                "lr": values.lr,
                "lambda": values.momentum,
                "tau_t": values.teacher_temp,
            }
            rows.append(row)
            logger.info(
                f"Epoch {epoch + 1}/{pretrain.epochs}: L_total={row['L_total']:.6f} "
                f"L_CE={row['L_CE']:.6f} lr={values.lr:.3g}"
            )
        return state, rows


LOG_COLUMNS = ("epoch", "L_CE", "L_KL", "L_sp", "L_var", "L_total", "lr", "lambda", "tau_t")


@dataclass
class PretrainResult:
    checkpoint_path: Path
    log_path: Path
    rows: List[dict]
    final_eval_loss: float
    state: TrainState


def write_epoch_log(path: Path, rows: Sequence[dict], final_eval_loss: float) -> Path:
    lines = ["\t".join(LOG_COLUMNS)]
    for row in rows:
        lines.append("\t".join(str(row["epoch"]) if c == "epoch" else repr(row[c]) for c in LOG_COLUMNS))
    lines.append(f"final_eval_loss\t{final_eval_loss!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_final_eval_loss(path: Union[str, Path]) -> float:
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("final_eval_loss"):
            return float(line.split("\t")[1])
    raise ValueError(f"No final_eval_loss entry in {path}")


def pretrain(
    cfg: RunConfig,
    images: Sequence[ToyImage],
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
    threads: int = 1,
) -> PretrainResult:
    """
    Pretrain on ``images`` and write ``checkpoint.prdl`` plus ``pretrain_log.txt``.

    Args:
        cfg: Resolved run configuration
        images: Non-empty pretraining images
        out_dir: Output directory
        seed: Root seed (defaults to ``cfg.seed``)
        threads: Workers for view composition

    Returns:
        PretrainResult with artifact paths, epoch rows and the probe loss
    """
    seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir)
    trainer = PRDLTrainer(cfg, threads)
    logger.info(f"Pretraining on {len(images)} images for {cfg.pretrain.epochs} epochs")
    state, rows = trainer.fit(images, seed)
    final_eval_loss = trainer.probe_loss(state, images, seed)

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.prdl", state.student, state.teacher, state.center, state.step
        )
        log_path = write_epoch_log(out_dir / "pretrain_log.txt", rows, final_eval_loss)
    except OSError as e:
        logger.error(f"Failed to write pretraining artifacts to {out_dir}: {e}")
        raise
    logger.info(f"Pretraining finished: final_eval_loss={final_eval_loss!r}")
    return PretrainResult(checkpoint_path, log_path, rows, final_eval_loss, state)


def reload_probe_loss(
    cfg: RunConfig, checkpoint_path: Union[str, Path], images: Sequence[ToyImage], seed: int
) -> float:
    """Probe loss recomputed from a saved checkpoint."""
    state = TrainState.from_checkpoint(load_checkpoint(checkpoint_path), cfg.pretrain.ema_start)
    return PRDLTrainer(cfg).probe_loss(state, images, seed)
