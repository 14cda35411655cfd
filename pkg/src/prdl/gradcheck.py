"""
Finite-difference gradient checking.

Central differences are taken by perturbing each parameter coordinate in
place and replaying the recorded computation, so every check exercises the
same trace that produced the analytic gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationRecord, Tensor
from .config import LossConfig
from .errors import ShapeMismatchError
from .losses import (
    cross_entropy,
    distillation_loss,
    kl_loss,
    sparsity_loss,
    variance_loss,
)
from .network import StudentNetwork, TeacherNetwork, prompted_mask
from .trainer import StepInputs, forward_losses
from .utils.seeding import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckEntry:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: float


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and finite-difference gradients."""

    value: float
    tolerance: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.relative_error <= self.tolerance for e in self.entries)

    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.relative_error > self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest per-element |a - n| / max(|a|, |n|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale, initial=0.0))


def _central_difference(
    record: ComputationRecord, param: Tensor, original: np.ndarray, index: Tuple[int, ...], h: float
) -> float:
    shifted = original.copy()
    shifted[index] = original[index] + h
    param.assign_(shifted)
    f_plus = float(record.replay().reshape(-1)[0])
    shifted[index] = original[index] - h
    param.assign_(shifted)
    f_minus = float(record.replay().reshape(-1)[0])
    return (f_plus - f_minus) / (2.0 * h)


def numeric_gradient(record: ComputationRecord, param: Tensor, h: float) -> np.ndarray:
    """
    Central differences of the recorded root with respect to ``param``.

    Differences at ``h`` and ``h / 2`` are combined by Richardson
    extrapolation, leaving an O(h^4) truncation error.
    """
    original = param.numpy()
    grad = np.zeros_like(original)
    for index in np.ndindex(original.shape):
        coarse = _central_difference(record, param, original, index, h)
        fine = _central_difference(record, param, original, index, h / 2.0)
        grad[index] = (4.0 * fine - coarse) / 3.0
    param.assign_(original)
    return grad


def grad_check(
    expression: Union[Tensor, Callable[[], Tensor]],
    params: Union[Mapping[str, Tensor], Sequence[Tensor]],
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central finite differences.

    Args:
        expression: Scalar tensor, or a callable building it from ``params``
        params: Parameters keyed by name (or a sequence of named tensors)
        h: Finite-difference step
        tolerance: Maximum relative error per parameter

    Returns:
        GradCheckReport; ``passed`` is False when any parameter exceeds the
        tolerance
    """
    root = expression() if callable(expression) else expression
    if root.size != 1:
        raise ShapeMismatchError("grad_check (scalar required)", root.shape, ())
    value, analytic = ad.evaluate_with_gradients(root, params)
    named = ad.named_inputs(params)

    record = ComputationRecord(root)
    report = GradCheckReport(value=value, tolerance=tolerance)
    try:
        for name, grad in analytic.items():
            numeric = numeric_gradient(record, named[name], h)
            report.entries.append(
                GradCheckEntry(name, grad, numeric, relative_error(grad, numeric))
            )
    finally:
        record.replay()
    for entry in report.failures():
        logger.warning(
            f"Gradient mismatch for '{entry.name}': relative error {entry.relative_error:.3e}"
        )
    return report


# Suite cases: each builds (expression, params) from a generator.

Case = Tuple[Tensor, Dict[str, Tensor]]


def _away_from_zero(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Random values with |x| in [0.1, 1.1], away from kinks at zero."""
    return rng.choice([-1.0, 1.0], size=shape) * (0.1 + rng.random(shape))


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _unary(fn: Callable[[Tensor], Tensor], positive: bool = False) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        values = 0.5 + rng.random((3, 4)) if positive else _away_from_zero(rng, (3, 4))
        x = ad.parameter(values, "x")
        return _weighted(fn(x), rng), {"x": x}

    return build


def _binary(fn: Callable[[Tensor, Tensor], Tensor], shape_b=(3, 4)) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        a = ad.parameter(rng.normal(size=(3, 4)), "a")
        b = ad.parameter(0.5 + rng.random(shape_b), "b")
        return _weighted(fn(a, b), rng), {"a": a, "b": b}

    return build


def _matmul_case(rng: np.random.Generator) -> Case:
    a = ad.parameter(rng.normal(size=(3, 4)), "a")
    b = ad.parameter(rng.normal(size=(4, 2)), "b")
    return _weighted(a @ b, rng), {"a": a, "b": b}


def _probabilities(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    raw = rng.random(shape) + 0.05
    return raw / raw.sum(axis=-1, keepdims=True)


def _cross_entropy_case(rng: np.random.Generator) -> Case:
    logits = ad.parameter(rng.normal(size=(5,)), "logits")
    return cross_entropy(_probabilities(rng, (5,)), ad.softmax(logits)), {"logits": logits}


def _distillation_case(rng: np.random.Generator) -> Case:
    student = ad.parameter(rng.normal(size=(2 * 4, 6)), "student_logits")
    sampled = ad.parameter(rng.normal(size=(2 * 2, 6)), "sampled_logits")
    loss = distillation_loss(
        _probabilities(rng, (2, 2, 6)),
        ad.softmax(student).reshape(2, 4, 6),
        ad.softmax(sampled).reshape(2, 2, 6),
    )
    return loss, {"student_logits": student, "sampled_logits": sampled}


def _kl_case(direction: str) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        mu = ad.parameter(rng.normal(size=(3, 5)), "mu")
        log_var = ad.parameter(rng.normal(scale=0.5, size=(3, 5)), "log_var")
        return kl_loss((mu, ad.exp(log_var * 0.5)), direction), {"mu": mu, "log_var": log_var}

    return build


def _mask_case(loss: Callable[[Tensor], Tensor]) -> Callable[[np.random.Generator], Case]:
    def build(rng: np.random.Generator) -> Case:
        logits = ad.parameter(rng.normal(size=(6, 8)), "mask.logits")
        prompts = (rng.random((4, 6)) < 0.5).astype(float)
        prompts[prompts.sum(axis=1) == 0, 0] = 1.0
        return loss(prompted_mask(ad.sigmoid(logits), prompts)), {"mask.logits": logits}

    return build


def _total_case(rng: np.random.Generator) -> Case:
    embed_dim, out_dim, num_operators, input_dim, batch, n_local = 8, 8, 6, 12, 2, 2
    student = StudentNetwork.build(
        input_dim, embed_dim, out_dim, rng, hidden_dims=(10,), projector_hidden=8,
        num_operators=num_operators, activation="tanh", log_var_init_scale=0.5,
    )
    teacher = TeacherNetwork.from_student(student)
    prompts = (rng.random((batch, 2, num_operators)) < 0.5).astype(float)
    prompts[..., 0] = 1.0
    inputs = StepInputs(
        anchors=rng.random((batch, input_dim)),
        global_views=rng.random((batch, 2, input_dim)),
        local_views=rng.random((batch, n_local, input_dim)),
        teacher_prompts=prompts,
        eps=rng.standard_normal((batch, 2, embed_dim)),
    )
    loss_cfg = LossConfig(student_temp=0.5, beta_kl=0.1, beta_sparsity=0.01, beta_variance=1.0)
    result = forward_losses(student, teacher, inputs, np.zeros(out_dim), 0.07, loss_cfg)
    return result.breakdown.graph, dict(student.named_parameters())


PRIMITIVE_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(lambda a, b: a + b),
    "add_broadcast": _binary(lambda a, b: a + b, shape_b=(4,)),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b),
    "matmul": _matmul_case,
    "neg": _unary(lambda x: -x),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sqrt": _unary(ad.sqrt, positive=True),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "relu": _unary(ad.relu),
    "maximum": _unary(lambda x: ad.maximum(x, 0.05)),
    "abs": _unary(ad.abs_),
    "softmax": _unary(lambda x: ad.softmax(x, axis=-1)),
    "sum_axis": _unary(lambda x: x.sum(axis=0)),
    "mean": _unary(lambda x: x.mean(axis=1, keepdims=True) * x),
    "var": _unary(lambda x: x.var(axis=-1)),
    "reshape": _unary(lambda x: x.reshape(4, 3) @ Tensor(np.ones((3, 2)))),
    "transpose": _unary(lambda x: x.T),
    "broadcast_to": _unary(lambda x: ad.broadcast_to(x.sum(axis=0), (2, 4))),
}

LOSS_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "cross_entropy": _cross_entropy_case,
    "distillation": _distillation_case,
    "kl_literal": _kl_case("literal"),
    "kl_conventional": _kl_case("conventional"),
    "sparsity": _mask_case(sparsity_loss),
    "variance": _mask_case(lambda m_p: variance_loss(m_p, 1e-4)),
    "total": _total_case,
}


@dataclass
class SuiteResult:
    case: str
    seed: int
    report: GradCheckReport


def run_gradcheck_suite(
    seed: int,
    n_seeds: int = 20,
    h: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    cases: Union[Sequence[str], None] = None,
) -> List[SuiteResult]:
    """
    Run every primitive and loss case for ``n_seeds`` derived seeds.

    Args:
        seed: Root seed
        n_seeds: Number of random instances per case
        h: Finite-difference step
        tolerance: Relative tolerance
        cases: Restrict to these case names

    Returns:
        One SuiteResult per (case, seed)
    """
    registry = {**PRIMITIVE_CASES, **LOSS_CASES}
    selected = list(registry) if cases is None else list(cases)
    unknown = [name for name in selected if name not in registry]
    if unknown:
        raise ValueError(f"Unknown gradcheck cases: {', '.join(unknown)}")

    results = []
    for name in selected:
        for index in range(n_seeds):
            expression, params = registry[name](derive_rng(seed, name, index))
            report = grad_check(expression, params, h, tolerance)
            results.append(SuiteResult(name, index, report))
        worst = max(r.report.max_relative_error for r in results if r.case == name)
        logger.info(f"gradcheck {name}: worst relative error {worst:.2e}")
    return results
