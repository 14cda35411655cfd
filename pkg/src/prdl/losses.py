"""
PRDL Losses

Cross-entropy distillation, KL regularization toward the standard normal,
mask sparsity and the variance hinge, and their weighted total. Everything
returns autodiff tensors so the total can be differentiated end to end.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import KL_DIRECTIONS, LossConfig
from .errors import DomainError, ShapeMismatchError
from .models.distribution import ReprDistribution
from .models.results import LossBreakdown

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

Probabilities = Union[Tensor, np.ndarray]


def _check_probabilities(values: np.ndarray, label: str) -> None:
    if np.any(np.isnan(values)) or np.any(values < 0):
        raise DomainError(f"{label}: probabilities must be non-negative and not NaN")


def _safe_log(probs: Tensor, label: str) -> Tensor:
    _check_probabilities(probs.data, label)
    if np.any(probs.data < LOG_FLOOR):
        logger.warning(
            f"{label}: {int(np.sum(probs.data < LOG_FLOOR))} entries below {LOG_FLOOR}, clamped"
        )
    return ad.log(ad.maximum(probs, LOG_FLOOR))


def cross_entropy(a: Probabilities, b: Probabilities) -> Tensor:
    """H(a, b) = -sum_i a_i log b_i over the last axis; ``a`` is a constant."""
    target = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = ad.as_tensor(b)
    if target.shape != b.shape:
        raise ShapeMismatchError("cross_entropy", target.shape, b.shape)
    _check_probabilities(target, "cross_entropy target")
    return -(Tensor(target) * _safe_log(b, "cross_entropy")).sum(axis=-1)


def _batched(probs: Probabilities, label: str) -> Probabilities:
    ndim = probs.ndim
    if ndim == 2:
        return probs.reshape(1, *probs.shape)
    if ndim != 3:
        raise ShapeMismatchError(label, probs.shape, ("B", "views", "P"))
    return probs


def distillation_loss(
    teacher_probs: Probabilities,
    student_probs: Probabilities,
    sampled_probs: Optional[Probabilities] = None,
) -> Tensor:
    """
    Multi-crop distillation with the representation-branch terms.

    Student view j shares its crop with teacher view j for j < number of
    teacher views; those pairs are skipped.

    Args:
        teacher_probs: (B, T, P) teacher global-view outputs, treated as constants
        student_probs: (B, S, P) student outputs, globals first then locals
        sampled_probs: (B, T, P) outputs of sampled representations, one per
            teacher view; None drops the second term

    Returns:
        Mean cross-entropy over cross-view pairs plus the mean over teacher
        views of H(teacher, sampled)
    """
    teacher = _batched(
        teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs),
        "distillation_loss (teacher)",
    )
    student = _batched(ad.as_tensor(student_probs), "distillation_loss (student)")
    sampled = (
        None
        if sampled_probs is None
        else _batched(ad.as_tensor(sampled_probs), "distillation_loss (sampled)")
    )

    batch, n_teacher, width = teacher.shape
    n_student = student.shape[1]
    if sampled is not None and sampled.shape != teacher.shape:
        raise ShapeMismatchError("distillation_loss (sampled vs teacher)", sampled.shape, teacher.shape)
    if student.shape[0] != batch or student.shape[2] != width or n_student < n_teacher:
        raise ShapeMismatchError("distillation_loss (student vs teacher)", student.shape, teacher.shape)
    _check_probabilities(teacher, "distillation_loss teacher")

    # pair weights: each student view sums the teacher views it is compared with
    weights = np.repeat(teacher.sum(axis=1, keepdims=True), n_student, axis=1)
    weights[:, :n_teacher] -= teacher
    pairs = n_teacher * n_student - n_teacher
    if pairs == 0:
        raise ShapeMismatchError("distillation_loss (no cross-view pairs)", student.shape, teacher.shape)

    cross_views = -(Tensor(weights) * _safe_log(student, "student probs")).sum() / (batch * pairs)
    if sampled is None:
        return cross_views
    sampled_views = -(Tensor(teacher) * _safe_log(sampled, "sampled probs")).sum() / (
        batch * n_teacher
    )
    return cross_views + sampled_views


def _distribution_tensors(dist: Union[ReprDistribution, Tuple[Tensor, Tensor]]) -> Tuple[Tensor, Tensor]:
    if isinstance(dist, ReprDistribution):
        return dist.mu, dist.sigma
    mu, sigma = (ad.as_tensor(x) for x in dist)
    if mu.shape != sigma.shape:
        raise ShapeMismatchError("kl_loss", mu.shape, sigma.shape)
    return mu, sigma


def kl_loss(
    dist: Union[ReprDistribution, Tuple[Tensor, Tensor]], direction: str = "literal"
) -> Tensor:
    """
    KL divergence between N(0, I) and N(mu, sigma^2), summed over D and
    averaged over the batch.

    ``literal`` is KL(N(0, I) || N(mu, sigma^2)); ``conventional`` is the usual
    variational penalty KL(N(mu, sigma^2) || N(0, I)).
    """
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"Unknown KL direction '{direction}', expected one of {KL_DIRECTIONS}")
    mu, sigma = _distribution_tensors(dist)
    if np.any(sigma.data <= 0):
        raise DomainError("kl_loss: sigma must be strictly positive")

    log_sigma = ad.log(sigma)
    variance = sigma * sigma
    if direction == "literal":
        per_dim = log_sigma + (1.0 + mu * mu) / (2.0 * variance) - 0.5
    else:
        per_dim = 0.5 * (variance + mu * mu - 1.0) - log_sigma
    return per_dim.sum(axis=-1).mean()


def sparsity_loss(m_p: Tensor) -> Tensor:
    """L1 norm of the prompted mask, averaged over rows."""
    return ad.l1_norm(ad.as_tensor(m_p), axis=-1).mean()


def variance_loss(m_p: Tensor, gamma: float = 1e-4) -> Tensor:
    """max(0, 1 - sqrt(Var_D(m_p) + gamma)), averaged over rows."""
    m_p = ad.as_tensor(m_p)
    if m_p.shape[-1] < 2:
        raise DomainError(f"variance_loss needs D >= 2, got D={m_p.shape[-1]}")
    if not gamma > 0:
        raise DomainError(f"variance_loss gamma must be positive, got {gamma}")
    std = ad.sqrt(m_p.var(axis=-1) + gamma)
    return ad.relu(1.0 - std).mean()


def total_loss(
    ce: Union[Tensor, float],
    kl: Union[Tensor, float],
    sparsity: Union[Tensor, float],
    variance: Union[Tensor, float],
    cfg: LossConfig,
) -> LossBreakdown:
    """Weighted total L_CE + b1 L_KL + b2 L_sp + b3 L_var with per-term values."""
    terms = [ad.as_tensor(term) for term in (ce, kl, sparsity, variance)]
    for term in terms:
        if term.size != 1:
            raise ShapeMismatchError("total_loss (scalar terms)", term.shape, ())
    ce_t, kl_t, sp_t, var_t = terms
    graph = ce_t + cfg.beta_kl * kl_t + cfg.beta_sparsity * sp_t + cfg.beta_variance * var_t
    return LossBreakdown(
        ce=ce_t.item(),
        kl=kl_t.item(),
        sparsity=sp_t.item(),
        variance=var_t.item(),
        total=graph.item(),
        graph=graph,
    )


def update_center(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """Running mean of teacher logits over the batch rows."""
    batch_mean = np.asarray(teacher_logits, dtype=np.float64).reshape(-1, center.shape[-1]).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean
