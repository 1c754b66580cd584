"""Toy reward ensemble and batch z-score composition.

Each metric is a pure function of the final sample ``y``, its condition and
the target mixture. Scores are z-scored per metric column and combined as a
weighted mean (a plain mean with the default equal weights).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.distributions import MultivariateNormal

from .exceptions import ConfigurationError, DomainError
from .flowcore import Condition, GaussianMixture

logger = logging.getLogger(__name__)

DEFAULT_METRICS = ("logdensity", "noise_penalty", "alignment", "neg_distance")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metric_target_logdensity(y: torch.Tensor, condition: Condition, mixture: GaussianMixture) -> float:
    target = mixture if condition.is_null else mixture.component(condition.label)
    try:
        dist = MultivariateNormal(target.means, covariance_matrix=target.covariances, validate_args=True)
    except (ValueError, RuntimeError) as exc:
        raise ConfigurationError(f"log-density metric needs positive-definite covariances: {exc}") from exc
    log_comp = dist.log_prob(y.unsqueeze(0).expand_as(target.means)) + torch.log(target.weights)
    return float(torch.logsumexp(log_comp, dim=0))


def metric_noise_penalty(y: torch.Tensor) -> float:
    """Negative energy of adjacent-coordinate differences; 0 for a constant vector."""
    if y.shape[-1] < 2:
        raise DomainError("noise penalty needs at least two coordinates")
    return -float((torch.diff(y) ** 2).sum())


def _distances(y: torch.Tensor, condition: Condition, mixture: GaussianMixture) -> Tuple[float, torch.Tensor]:
    if condition.is_null:
        raise DomainError("sample-to-condition metrics need a labelled condition")
    if condition.label >= mixture.components:
        raise DomainError(f"label {condition.label} outside the {mixture.components} known classes")
    dists = torch.linalg.vector_norm(mixture.means - y, dim=-1)
    return float(dists[condition.label]), dists


def metric_condition_alignment(y: torch.Tensor, condition: Condition, mixture: GaussianMixture) -> float:
    """Distance to the nearest wrong mean minus distance to the conditioned mean."""
    own, dists = _distances(y, condition, mixture)
    if mixture.components < 2:
        raise DomainError("alignment margin needs at least two components")
    others = torch.cat([dists[:condition.label], dists[condition.label + 1:]])
    return float(others.min()) - own


def metric_neg_distance(y: torch.Tensor, condition: Condition, mixture: GaussianMixture) -> float:
    return -_distances(y, condition, mixture)[0]


def metric_detail(y: torch.Tensor, condition: Condition, mixture: GaussianMixture) -> float:
    """Spread of the sample around its conditioned mean (a "more detail" proxy)."""
    return _distances(y, condition, mixture)[0]


METRICS: Dict[str, Callable[[torch.Tensor, Condition, GaussianMixture], float]] = {
    "logdensity": metric_target_logdensity,
    "noise_penalty": lambda y, condition, mixture: metric_noise_penalty(y),
    "alignment": metric_condition_alignment,
    "neg_distance": metric_neg_distance,
    "detail": metric_detail,
}


# ---------------------------------------------------------------------------
# Spec and batches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSpec:
    kind: str
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ConfigurationError(f"unknown reward metric {self.kind!r}; known: {sorted(METRICS)}")
        if not self.weight > 0:
            raise ConfigurationError(f"metric weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class RewardSpec:
    metrics: Tuple[MetricSpec, ...] = tuple(MetricSpec(kind) for kind in DEFAULT_METRICS)
    eps_z: float = 1e-8

    def __post_init__(self):
        if not self.metrics:
            raise ConfigurationError("a reward spec needs at least one metric")
        if not self.eps_z > 0:
            raise ConfigurationError(f"eps_z must be positive, got {self.eps_z}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(m.kind for m in self.metrics)

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.metrics], dtype=np.float64)


@dataclass
class BatchScores:
    names: Tuple[str, ...]
    raw: np.ndarray
    normalized: Optional[np.ndarray] = None
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 2 or self.raw.shape[1] != len(self.names):
            raise ConfigurationError("score matrix must be samples x metrics")

    def __len__(self) -> int:
        return self.raw.shape[0]

    def column_stats(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-metric mean and population std of the raw scores."""
        return self.raw.mean(axis=0), self.raw.std(axis=0)


def score_samples(samples: Sequence[torch.Tensor], conditions: Sequence[Condition], spec: RewardSpec,
                  mixture: GaussianMixture) -> BatchScores:
    rows = [
        [METRICS[metric.kind](y, condition, mixture) for metric in spec.metrics]
        for y, condition in zip(samples, conditions)
    ]
    return BatchScores(spec.names, np.array(rows, dtype=np.float64).reshape(len(rows), len(spec.metrics)))


def zscore_normalize(scores: BatchScores, eps_z: float = 1e-8,
                     reference: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> BatchScores:
    """Column-wise ``(s - mean) / (std + eps_z)``.

    ``reference`` replaces the batch's own mean/std, which evaluation uses to
    put every mode on the synchronous baseline's scale.
    """
    if not eps_z > 0:
        raise ConfigurationError(f"eps_z must be positive, got {eps_z}")
    if reference is None:
        if len(scores) < 2:
            raise DomainError("z-scoring needs at least two samples")
        reference = scores.column_stats()
    mean, std = reference
    normalized = (scores.raw - mean) / (std + eps_z)
    return BatchScores(scores.names, scores.raw, normalized, (mean, std))


def composite_reward(scores: BatchScores, weights: Optional[np.ndarray] = None) -> np.ndarray:
    if scores.normalized is None:
        raise DomainError("composite reward needs normalized scores")
    if weights is None:
        weights = np.ones(len(scores.names))
    weights = np.asarray(weights, dtype=np.float64)
    return scores.normalized @ weights / weights.sum()


def weighted_raw(scores: BatchScores, spec: RewardSpec) -> np.ndarray:
    """Weighted mean of raw scores per sample; logged for audit, never used as an advantage."""
    return scores.raw @ spec.weights / spec.weights.sum()
