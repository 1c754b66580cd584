"""Flow-matching path, time grids and velocity fields.

Path convention: ``x_t = t * eps + (1 - t) * x0``; t=1 is pure noise, t=0 is
data and ``dx/dt = eps - x0`` is the regression target.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, DomainError, NumericError, UsageError
from .kernel import DTYPE, Dense, ParameterStore, as_tensor, require_finite

logger = logging.getLogger(__name__)

TIME_FREQUENCIES = 16
MAX_TIME_FREQUENCY = 100.0


# ---------------------------------------------------------------------------
# Conditions and time featurisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """A class label, or ``None`` for the reserved NULL (unconditional) label."""

    label: Optional[int] = None

    def __post_init__(self):
        if self.label is not None and (not isinstance(self.label, (int, np.integer)) or self.label < 0):
            raise DomainError(f"condition label must be a non-negative integer, got {self.label!r}")

    @classmethod
    def null(cls) -> "Condition":
        return cls(None)

    @property
    def is_null(self) -> bool:
        return self.label is None


NULL = Condition.null()

ConditionArg = Union[Condition, Sequence[Condition]]


def embed_conditions(table: torch.Tensor, conditions: Sequence[Condition]) -> torch.Tensor:
    """Rows of ``table`` per label; NULL maps to the all-zeros row."""
    num_classes, width = table.shape
    padded = torch.cat([table, torch.zeros(1, width, dtype=table.dtype)], dim=0)
    index = []
    for condition in conditions:
        if condition.is_null:
            index.append(num_classes)
        elif condition.label >= num_classes:
            raise DomainError(f"label {condition.label} outside the {num_classes} known classes")
        else:
            index.append(int(condition.label))
    return padded[torch.tensor(index, dtype=torch.long)]


def sinusoidal_embedding(t, frequencies: int = TIME_FREQUENCIES, max_frequency: float = MAX_TIME_FREQUENCY) -> torch.Tensor:
    """``[sin(w t), cos(w t)]`` with ``w`` geometric from 1 to ``max_frequency``."""
    t = as_tensor(t)
    freqs = torch.exp(torch.linspace(0.0, math.log(max_frequency), frequencies, dtype=DTYPE))
    angles = t.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


# ---------------------------------------------------------------------------
# Time grids and the path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    values: Tuple[float, ...]

    def __post_init__(self):
        values = self.values
        if len(values) < 2:
            raise ConfigurationError("a time grid needs at least one interval")
        if values[0] != 1.0 or values[-1] != 0.0:
            raise ConfigurationError(f"time grid must run from 1 to 0, got {values[0]}..{values[-1]}")
        if any(a <= b for a, b in zip(values, values[1:])):
            raise ConfigurationError("time grid must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.values) - 1

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> float:
        return self.values[index]


def make_time_grid(steps: int, kind: str = "uniform", shift: float = 1.0) -> TimeGrid:
    if steps < 1:
        raise ConfigurationError(f"time grid needs K >= 1 steps, got {steps}")
    u = [1.0 - k / steps for k in range(steps + 1)]
    if kind == "uniform":
        values = u
    elif kind == "shifted":
        if not shift > 0:
            raise ConfigurationError(f"grid shift must be positive, got {shift}")
        values = [shift * uk / (1.0 + (shift - 1.0) * uk) for uk in u]
    else:
        raise ConfigurationError(f"unknown grid kind {kind!r}")
    values[0], values[-1] = 1.0, 0.0
    return TimeGrid(tuple(values))


@dataclass(frozen=True)
class FlowSample:
    x0: torch.Tensor
    eps: torch.Tensor
    t: float
    x_t: torch.Tensor


def corrupt(x0: torch.Tensor, eps: torch.Tensor, t: float) -> FlowSample:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"path time must lie in [0, 1], got {t}")
    if x0.shape != eps.shape:
        raise ConfigurationError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ in shape")
    return FlowSample(x0=x0, eps=eps, t=t, x_t=t * eps + (1.0 - t) * x0)


def clean_estimate(x: torch.Tensor, t: float, v: torch.Tensor) -> torch.Tensor:
    return x - t * v


def fm_loss(field, x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, conditions: Sequence[Condition]) -> torch.Tensor:
    """Mean over the batch of ``||field(x_t, t, c) - (eps - x0)||^2``."""
    if x0.dim() != 2 or x0.shape[0] == 0:
        raise ConfigurationError("fm_loss needs a non-empty (n, d) batch")
    if eps.shape != x0.shape or t.shape != (x0.shape[0],) or len(conditions) != x0.shape[0]:
        raise ConfigurationError("fm_loss batch members disagree in size")
    if ((t < 0) | (t > 1)).any():
        raise DomainError("fm_loss times must lie in [0, 1]")
    x_t = t[:, None] * eps + (1.0 - t[:, None]) * x0
    residual = field(x_t, t, conditions) - (eps - x0)
    return (residual ** 2).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# Analytic fields
# ---------------------------------------------------------------------------

def _check_time(t: float) -> float:
    t = float(t)
    if t == 0.0:
        raise DomainError("velocity is singular at t=0; use the final-step identity instead")
    if not 0.0 < t <= 1.0:
        raise DomainError(f"velocity time must lie in (0, 1], got {t}")
    return t


def analytic_velocity_point(x: torch.Tensor, t: float, m: torch.Tensor) -> torch.Tensor:
    t = _check_time(t)
    return (x - m) / t


@dataclass(frozen=True)
class GaussianMixture:
    weights: torch.Tensor
    means: torch.Tensor
    covariances: torch.Tensor

    def __post_init__(self):
        j, d = self.means.shape
        if self.weights.shape != (j,) or self.covariances.shape != (j, d, d):
            raise ConfigurationError("mixture weights, means and covariances disagree in shape")
        if (self.weights <= 0).any() or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("mixture weights must be positive and sum to 1")
        if not torch.allclose(self.covariances, self.covariances.transpose(-1, -2), atol=1e-12):
            raise ConfigurationError("mixture covariances must be symmetric")
        if (torch.linalg.eigvalsh(self.covariances) < -1e-12).any():
            raise ConfigurationError("mixture covariances must be positive semi-definite")

    @classmethod
    def isotropic(cls, weights, means, stds) -> "GaussianMixture":
        means = as_tensor(means)
        stds = as_tensor(stds).reshape(-1)
        if stds.numel() == 1:
            stds = stds.expand(means.shape[0])
        eye = torch.eye(means.shape[1], dtype=DTYPE)
        return cls(as_tensor(weights), means, (stds ** 2)[:, None, None] * eye)

    @property
    def components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_point(self) -> bool:
        return bool((self.covariances == 0).all())

    def component(self, index: int) -> "GaussianMixture":
        if not 0 <= index < self.components:
            raise DomainError(f"mixture has no component {index}")
        return GaussianMixture(
            torch.ones(1, dtype=DTYPE), self.means[index:index + 1], self.covariances[index:index + 1]
        )

    def sample(self, rng: np.random.Generator, labels: Sequence[int]) -> torch.Tensor:
        """One draw per label from that label's component."""
        labels = np.asarray(labels, dtype=np.int64)
        z = torch.from_numpy(rng.standard_normal((len(labels), self.dim)))
        # symmetric square root; tolerates zero (point) covariances
        eigvals, eigvecs = torch.linalg.eigh(self.covariances)
        root = eigvecs @ torch.diag_embed(eigvals.clamp(min=0.0).sqrt()) @ eigvecs.transpose(-1, -2)
        index = torch.from_numpy(labels)
        return self.means[index] + (root[index] @ z.unsqueeze(-1)).squeeze(-1)

    def draw_labels(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.components, size=n, p=self.weights.numpy())


def analytic_velocity_mixture(x: torch.Tensor, t: float, mixture: GaussianMixture) -> torch.Tensor:
    """``E[eps - x0 | x_t = x]`` for Gaussian-mixture data and standard-normal noise.

    Component j has x_t ~ N((1-t) mu_j, S_j) with S_j = (1-t)^2 Sigma_j + t^2 I,
    and E[eps - x0 | x_t, j] = (t I - (1-t) Sigma_j) S_j^{-1} (x - (1-t) mu_j) - mu_j.
    """
    t = _check_time(t)
    d = mixture.dim
    rows = x.reshape(-1, d)
    eye = torch.eye(d, dtype=DTYPE)
    s = (1.0 - t) ** 2 * mixture.covariances + t ** 2 * eye
    diff = rows[:, None, :] - (1.0 - t) * mixture.means[None]
    solved = torch.linalg.solve(s, diff.unsqueeze(-1))
    mahalanobis = (diff * solved.squeeze(-1)).sum(dim=-1)
    log_comp = torch.log(mixture.weights) - 0.5 * (
        d * math.log(2.0 * math.pi) + torch.logdet(s) + mahalanobis
    )
    log_norm = torch.logsumexp(log_comp, dim=1, keepdim=True)
    if not torch.isfinite(log_norm).all():
        raise NumericError(f"mixture responsibilities underflow at t={t}")
    responsibilities = torch.exp(log_comp - log_norm)
    gain = t * eye - (1.0 - t) * mixture.covariances
    conditional = (gain @ solved).squeeze(-1) - mixture.means
    velocity = (responsibilities.unsqueeze(-1) * conditional).sum(dim=1)
    return velocity.reshape(x.shape)


class VelocityField(Protocol):
    dim: int

    def __call__(self, x: torch.Tensor, t, condition: ConditionArg) -> torch.Tensor:
        ...


class AnalyticField:
    """Closed-form field over a mixture target.

    Labelled conditions use their own component; NULL uses the whole mixture.
    Zero-covariance (point) components go through ``analytic_velocity_point``.
    """

    def __init__(self, mixture: GaussianMixture):
        self.mixture = mixture
        self.dim = mixture.dim
        self._components = [mixture.component(j) for j in range(mixture.components)]

    def _single(self, x: torch.Tensor, t: float, condition: Condition) -> torch.Tensor:
        if condition.is_null:
            return analytic_velocity_mixture(x, t, self.mixture)
        if condition.label >= self.mixture.components:
            raise DomainError(f"label {condition.label} outside the {self.mixture.components} known classes")
        component = self._components[condition.label]
        if component.is_point:
            return analytic_velocity_point(x, t, component.means[0])
        return analytic_velocity_mixture(x, t, component)

    def __call__(self, x: torch.Tensor, t, condition: ConditionArg) -> torch.Tensor:
        if isinstance(condition, Condition):
            return self._single(x, float(t), condition)
        times = as_tensor(t).expand(x.shape[0])
        return torch.stack([self._single(row, float(tk), c) for row, tk, c in zip(x, times, condition)])


# ---------------------------------------------------------------------------
# Learned field
# ---------------------------------------------------------------------------

class LearnedField(nn.Module):
    """MLP over ``[x, time embedding, condition embedding]`` with SiLU hidden layers."""

    def __init__(self, dim: int, num_classes: int, hidden: int = 128, depth: int = 3,
                 time_frequencies: int = TIME_FREQUENCIES, condition_dim: int = 16):
        super().__init__()
        if dim <= 0 or num_classes <= 0 or depth <= 0:
            raise ConfigurationError("learned field needs positive dim, classes and depth")
        self.dim = dim
        self.num_classes = num_classes
        self.time_frequencies = time_frequencies
        self.class_table = nn.Parameter(torch.zeros(num_classes, condition_dim, dtype=DTYPE))
        widths = [dim + 2 * time_frequencies + condition_dim] + [hidden] * depth
        self.hidden = nn.ModuleList(Dense(a, b) for a, b in zip(widths, widths[1:]))
        self.readout = Dense(hidden, dim)
        self.initialized = False

    def reset_parameters(self, generator: torch.Generator, zero_readout: bool = False) -> None:
        for layer in self.hidden:
            layer.reset_parameters(generator)
        self.readout.reset_parameters(generator, zero=zero_readout)
        with torch.no_grad():
            self.class_table.normal_(0.0, 1.0, generator=generator)
        self.initialized = True

    def forward(self, x: torch.Tensor, t, condition: ConditionArg) -> torch.Tensor:
        single = x.dim() == 1
        rows = x.unsqueeze(0) if single else x
        conditions = [condition] * rows.shape[0] if isinstance(condition, Condition) else list(condition)
        times = as_tensor(t).reshape(-1).expand(rows.shape[0])
        if ((times < 0) | (times > 1)).any():
            raise DomainError("learned field time must lie in [0, 1]")
        features = torch.cat(
            [rows, sinusoidal_embedding(times, self.time_frequencies), embed_conditions(self.class_table, conditions)],
            dim=-1,
        )
        for layer in self.hidden:
            features = F.silu(layer(features))
        out = require_finite(self.readout(features), "learned field output")
        return out[0] if single else out


def learned_field_forward(x: torch.Tensor, t: float, condition: Condition, store: ParameterStore) -> torch.Tensor:
    if not isinstance(store.module, LearnedField) or not store.initialized:
        raise UsageError("learned field store is not initialized")
    return store.module(x, t, condition)
