"""
PRDL Network

Encoder, projection head, distribution heads and learnable augmentation
masks built on the autodiff core, plus the teacher/student pair and the
EMA update that ties them together.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ACTIVATIONS
from .errors import DomainError, InvalidPromptError, ShapeMismatchError
from .models.distribution import ReprDistribution
from .models.image import ToyImage, View
from .models.prompt import NUM_OPERATORS, Prompt, validate_bits

logger = logging.getLogger(__name__)

ViewInput = Union[View, ToyImage, np.ndarray, Tensor, Sequence[View]]
PromptInput = Union[Prompt, Sequence[Prompt], np.ndarray]


class DenseStack:
    """Fully connected layers with an activation between them (none at the end)."""

    def __init__(self, layers: List[Tuple[Tensor, Tensor]], activation: str = "relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{activation}', expected one of {ACTIVATIONS}")
        if not layers:
            raise ValueError("DenseStack needs at least one layer")
        for (weight, _), (next_weight, _) in zip(layers, layers[1:]):
            if weight.shape[1] != next_weight.shape[0]:
                raise ShapeMismatchError("DenseStack", weight.shape, next_weight.shape)
        self.layers = layers
        self.activation = activation

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "relu",
        init_scale: float = 1.0,
        requires_grad: bool = True,
    ) -> "DenseStack":
        """He-initialized weights, zero biases."""
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            std = init_scale * np.sqrt(2.0 / fan_in)
            weight = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad)
            bias = Tensor(np.zeros(fan_out), requires_grad)
            layers.append((weight, bias))
        return cls(layers, activation)

    @classmethod
    def from_arrays(
        cls,
        arrays: Sequence[Tuple[np.ndarray, np.ndarray]],
        activation: str = "relu",
        requires_grad: bool = True,
    ) -> "DenseStack":
        return cls(
            [(Tensor(w, requires_grad), Tensor(b, requires_grad)) for w, b in arrays],
            activation,
        )

    @property
    def input_dim(self) -> int:
        return int(self.layers[0][0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.layers[-1][0].shape[1])

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, inputs: Tensor) -> Tensor:
        hidden = inputs
        last = len(self.layers) - 1
        for index, (weight, bias) in enumerate(self.layers):
            hidden = hidden @ weight + bias
            if index < last:
                hidden = hidden.relu() if self.activation == "relu" else hidden.tanh()
        return hidden

    def named_parameters(self, prefix: str) -> "OrderedDict[str, Tensor]":
        params: "OrderedDict[str, Tensor]" = OrderedDict()
        for index, (weight, bias) in enumerate(self.layers):
            params[f"{prefix}.{index}.weight"] = weight
            params[f"{prefix}.{index}.bias"] = bias
        return params

    def copy(self, requires_grad: bool) -> "DenseStack":
        return DenseStack.from_arrays(
            [(w.data, b.data) for w, b in self.layers], self.activation, requires_grad
        )


class MaskMatrix:
    """Learnable K x D logits U; the augmentation masks are M = sigmoid(U)."""

    def __init__(self, logits: Tensor):
        if logits.ndim != 2:
            raise ShapeMismatchError("MaskMatrix", logits.shape, ("K", "D"))
        self.logits = logits

    @classmethod
    def build(
        cls, num_operators: int, dim: int, rng: np.random.Generator, std: float = 1.0
    ) -> "MaskMatrix":
        return cls(ad.parameter(rng.normal(0.0, std, size=(num_operators, dim)), "mask.logits"))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.logits.shape

    def matrix(self) -> Tensor:
        return ad.sigmoid(self.logits)

    def values(self) -> np.ndarray:
        with ad.no_grad():
            return self.matrix().numpy()


@dataclass
class DistributionHeads:
    """Mean head h_mu and log-variance head h_sigma, both D -> D."""

    mu: DenseStack
    log_var: DenseStack

    def named_parameters(self, prefix: str) -> "OrderedDict[str, Tensor]":
        params = self.mu.named_parameters(f"{prefix}.mu")
        params.update(self.log_var.named_parameters(f"{prefix}.log_var"))
        return params


@dataclass
class StudentNetwork:
    """Gradient-trained parameters: encoder, projector, heads and mask logits."""

    encoder: DenseStack
    projector: DenseStack
    heads: DistributionHeads
    mask: MaskMatrix

    @classmethod
    def build(
        cls,
        input_dim: int,
        embed_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden_dims: Sequence[int] = (128, 128),
        projector_hidden: int = 64,
        head_depth: int = 1,
        num_operators: int = NUM_OPERATORS,
        activation: str = "relu",
        mask_init_std: float = 1.0,
        log_var_init_scale: float = 0.01,
    ) -> "StudentNetwork":
        if head_depth < 1:
            raise ValueError(f"head_depth must be >= 1, got {head_depth}")
        encoder = DenseStack.build([input_dim, *hidden_dims, embed_dim], rng, activation)
        projector = DenseStack.build([embed_dim, projector_hidden, out_dim], rng, activation)
        head_sizes = [embed_dim] * (head_depth + 1)
        heads = DistributionHeads(
            mu=DenseStack.build(head_sizes, rng, activation),
            log_var=DenseStack.build(head_sizes, rng, activation, init_scale=log_var_init_scale),
        )
        mask = MaskMatrix.build(num_operators, embed_dim, rng, mask_init_std)
        logger.info(
            f"Built student: input={input_dim}, D={embed_dim}, P={out_dim}, "
            f"K={num_operators}, hidden={list(hidden_dims)}"
        )
        return cls(encoder, projector, heads, mask)

    @property
    def embed_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def out_dim(self) -> int:
        return self.projector.output_dim

    @property
    def num_operators(self) -> int:
        return int(self.mask.shape[0])

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = self.encoder.named_parameters("encoder")
        params.update(self.projector.named_parameters("projector"))
        params.update(self.heads.named_parameters("heads"))
        params["mask.logits"] = self.mask.logits
        return params


@dataclass
class TeacherNetwork:
    """EMA copy of the student encoder and projector; never differentiated."""

    encoder: DenseStack
    projector: DenseStack

    @classmethod
    def from_student(cls, student: StudentNetwork) -> "TeacherNetwork":
        return cls(student.encoder.copy(False), student.projector.copy(False))

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = self.encoder.named_parameters("encoder")
        params.update(self.projector.named_parameters("projector"))
        return params


@dataclass
class EmaState:
    teacher: TeacherNetwork
    momentum: float = 0.996


def _view_matrix(view: ViewInput, input_dim: int) -> Tuple[Tensor, bool]:
    """Stack views into a (B, input_dim) tensor; flag whether input was a single view."""
    if isinstance(view, (View, ToyImage)):
        tensor, single = Tensor(view.flatten()[None, :]), True
    elif isinstance(view, Tensor):
        single = view.ndim == 1
        tensor = view.reshape(1, -1) if single else view
    elif isinstance(view, np.ndarray):
        single = view.ndim == 1
        tensor = Tensor(view[None, :] if single else view)
    else:
        tensor, single = Tensor(np.stack([v.flatten() for v in view])), False
    if tensor.ndim != 2 or tensor.shape[1] != input_dim:
        raise ShapeMismatchError("encode", tensor.shape, ("B", input_dim))
    return tensor, single


def encode(encoder: DenseStack, view: ViewInput) -> Tensor:
    """
    Map canonical-size views to representations.

    Args:
        encoder: Encoder stack (student or teacher)
        view: A View/ToyImage, a flattened vector, or a batch (B, 3*16*16)

    Returns:
        D-vector for a single view, (B, D) for a batch
    """
    inputs, single = _view_matrix(view, encoder.input_dim)
    output = encoder(inputs)
    return output.reshape(output.shape[1]) if single else output


def project_probs(
    projector: DenseStack,
    z: Union[Tensor, np.ndarray],
    temperature: float,
    center: Optional[np.ndarray] = None,
) -> Tensor:
    """softmax((g(z) - center) / temperature) over the last axis."""
    if not temperature > 0:
        raise DomainError(f"Temperature must be positive, got {temperature}")
    z = ad.as_tensor(z)
    single = z.ndim == 1
    logits = projector(z.reshape(1, -1) if single else z)
    if center is not None:
        logits = logits - center
    probs = ad.softmax(logits / temperature, axis=-1)
    return probs.reshape(probs.shape[1]) if single else probs


def estimate_distribution(
    encoder: DenseStack, heads: DistributionHeads, view: ViewInput
) -> ReprDistribution:
    """mu = h_mu(f(x)), sigma = exp(h_sigma(f(x)) / 2)."""
    z = encode(encoder, view)
    single = z.ndim == 1
    hidden = z.reshape(1, -1) if single else z
    mu = heads.mu(hidden)
    sigma = ad.exp(heads.log_var(hidden) * 0.5)
    if single:
        mu, sigma = mu.reshape(mu.shape[1]), sigma.reshape(sigma.shape[1])
    return ReprDistribution(mu, sigma)


def prompt_weights(prompts: PromptInput, num_operators: int) -> Tuple[np.ndarray, bool]:
    """Row-normalized prompt matrix p / ||p||_1, shape (B, K)."""
    if isinstance(prompts, Prompt):
        rows, single = prompts.as_array()[None, :], True
    elif isinstance(prompts, np.ndarray):
        single = prompts.ndim == 1
        rows = np.atleast_2d(np.asarray(prompts, dtype=np.float64))
    else:
        rows, single = np.stack([p.as_array() for p in prompts]), False
    for row in rows:
        validate_bits(row, num_operators)
    totals = rows.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise InvalidPromptError("All-zero prompt selects no augmentation operator")
    return rows / totals, single


def prompted_mask(mask: Union[MaskMatrix, Tensor], prompts: PromptInput) -> Tensor:
    """m_p = p M / ||p||_1 for one prompt (D,) or a batch (B, D)."""
    matrix = mask.matrix() if isinstance(mask, MaskMatrix) else ad.as_tensor(mask)
    weights, single = prompt_weights(prompts, matrix.shape[0])
    m_p = Tensor(weights) @ matrix
    return m_p.reshape(m_p.shape[1]) if single else m_p


def prompted_sigma(
    mask: Union[MaskMatrix, Tensor], sigma: Union[Tensor, np.ndarray], prompts: PromptInput
) -> Tensor:
    """sigma_p = sigma * m_p (Hadamard)."""
    m_p = prompted_mask(mask, prompts)
    sigma = ad.as_tensor(sigma)
    if sigma.shape[-1] != m_p.shape[-1]:
        raise ShapeMismatchError("prompted_sigma", sigma.shape, m_p.shape)
    return sigma * m_p


def sample_representation(
    dist: ReprDistribution,
    sigma_p: Union[Tensor, np.ndarray],
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Reparameterized draw z_v = mu + sigma_p * eps with eps ~ N(0, I).

    Args:
        dist: Distribution supplying mu
        sigma_p: Prompted standard deviations, same shape as mu
        rng: Generator for eps (ignored when ``eps`` is given)
        eps: Fixed noise, e.g. zeros for degenerate sampling

    Returns:
        Sample differentiable in mu and sigma_p with eps held constant
    """
    sigma_p = ad.as_tensor(sigma_p)
    if sigma_p.shape != dist.mu.shape:
        raise ShapeMismatchError("sample_representation", dist.mu.shape, sigma_p.shape)
    if np.any(sigma_p.data < 0):
        raise DomainError("sample_representation: sigma_p must be non-negative")
    if eps is None:
        if rng is None:
            raise ValueError("sample_representation needs either rng or eps")
        eps = rng.standard_normal(dist.mu.shape)
    elif np.shape(eps) != dist.mu.shape:
        raise ShapeMismatchError("sample_representation", dist.mu.shape, np.shape(eps))
    return dist.mu + sigma_p * Tensor(eps)


def ema_update(
    ema: EmaState,
    student: Union[StudentNetwork, Mapping[str, Union[Tensor, np.ndarray]]],
    momentum: Optional[float] = None,
) -> TeacherNetwork:
    """theta_t <- lambda * theta_t + (1 - lambda) * theta_s, in place."""
    momentum = ema.momentum if momentum is None else momentum
    if not 0.0 <= momentum <= 1.0:
        raise DomainError(f"EMA momentum must be in [0, 1], got {momentum}")
    source = student.named_parameters() if isinstance(student, StudentNetwork) else student

    for name, target in ema.teacher.named_parameters().items():
        if name not in source:
            raise ShapeMismatchError(f"ema_update ({name} missing)", target.shape, ())
        values = source[name]
        values = values.data if isinstance(values, Tensor) else np.asarray(values, np.float64)
        if values.shape != target.shape:
            raise ShapeMismatchError(f"ema_update ({name})", target.shape, values.shape)
        target.assign_(momentum * target.data + (1.0 - momentum) * values)
    return ema.teacher


def mask_similarity(mask: Union[MaskMatrix, Tensor, np.ndarray]) -> np.ndarray:
    """K x K cosine similarity between mask rows."""
    if isinstance(mask, MaskMatrix):
        rows = mask.values()
    elif isinstance(mask, Tensor):
        rows = mask.numpy()
    else:
        rows = np.asarray(mask, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DomainError("mask_similarity: zero mask row")
    unit = rows / norms
    similarity = unit @ unit.T
    similarity = np.minimum((similarity + similarity.T) / 2.0, 1.0)
    np.fill_diagonal(similarity, 1.0)
    return similarity


def parameter_arrays(params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: tensor.numpy() for name, tensor in params.items()}
