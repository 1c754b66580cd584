"""Group-relative, trajectory-level PPO-clip training of the TPM.

A whole sampling trajectory is one action: its log-probability is the sum of
the per-step Beta log-densities, and the clip ratio is formed from those sums.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from . import rng as rngs
from .exceptions import ConfigurationError, DomainError, NumericError, UsageError
from .flowcore import Condition, GaussianMixture, TimeGrid, VelocityField
from .kernel import AdamState, ParameterStore, adam_step, as_tensor, backward, clip_global_norm
from .rewards import BatchScores, RewardSpec, composite_reward, score_samples, weighted_raw, zscore_normalize
from .sampler import AsyncConfig, Trajectory, check_batch_termination, mean_deviation, sample_async
from .tpm import TimestepPredictor, TPMBatch, beta_log_prob_tensor

logger = logging.getLogger(__name__)

LOGP_GAP_LIMIT = 30.0


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 16
    minibatch: int = 4
    clip_eps: float = 0.2
    iterations: int = 500
    lr: float = 2e-5
    max_grad_norm: float = 1.0
    epochs: int = 1
    checkpoint_every: int = 100
    saturation_patience: int = 50

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigurationError("GRPO groups need at least two trajectories")
        if self.minibatch < 1 or self.group_size % self.minibatch:
            raise ConfigurationError(
                f"minibatch {self.minibatch} must divide the group size {self.group_size}"
            )
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError(f"clip epsilon must lie in (0, 1), got {self.clip_eps}")
        if self.iterations < 0 or self.epochs < 1:
            raise ConfigurationError("iterations must be >= 0 and epochs >= 1")
        if not self.lr > 0 or not self.max_grad_norm > 0:
            raise ConfigurationError("learning rate and gradient cap must be positive")


@dataclass
class RolloutGroup:
    condition: Condition
    trajectories: List[Trajectory]
    scores: BatchScores
    rewards: np.ndarray
    old_log_probs: np.ndarray

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def reward_std(self) -> float:
        return float(self.rewards.std())


def trajectory_log_prob(traj: Trajectory) -> float:
    if not traj.steps:
        raise UsageError("trajectory has no step records")
    missing = [s.k for s in traj.steps if s.log_prob is None]
    if missing:
        raise UsageError(f"steps {missing} carry no Beta action")
    return math.fsum(s.log_prob for s in traj.steps)


def group_advantages(rewards: Sequence[float], eps_z: float = 1e-8) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise DomainError("group advantages need at least two trajectories")
    return (rewards - rewards.mean()) / (rewards.std() + eps_z)


def ppo_clip_objective(logp_new: torch.Tensor, logp_old: torch.Tensor, advantages: torch.Tensor,
                       clip_eps: float = 0.2):
    """Mean of ``min(ratio * A, clip(ratio) * A)``; returns (objective, stats)."""
    gap = logp_new - logp_old
    overflow = int((gap.abs() > LOGP_GAP_LIMIT).sum())
    if overflow:
        logger.warning("%d log-prob gaps exceed %.0f; ratios clipped at the bound", overflow, LOGP_GAP_LIMIT)
        gap = gap.clamp(-LOGP_GAP_LIMIT, LOGP_GAP_LIMIT)
    ratio = torch.exp(gap)
    unclipped = ratio * advantages
    clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantages
    objective = torch.minimum(unclipped, clipped).mean()
    with torch.no_grad():
        active = ((advantages > 0) & (ratio > 1.0 + clip_eps)) | ((advantages < 0) & (ratio < 1.0 - clip_eps))
    stats = {"clip_fraction": float(active.double().mean()), "overflow": overflow}
    return objective, stats


def recompute_log_probs(tpm: TimestepPredictor, trajectories: Sequence[Trajectory]) -> torch.Tensor:
    """Summed Beta log-densities of the recorded ratios under the current TPM."""
    inputs, owners, ratios = [], [], []
    for index, traj in enumerate(trajectories):
        for step, inp in zip(traj.steps, traj.tpm_inputs()):
            if step.r is None:
                raise UsageError("trajectory step has no recorded ratio")
            inputs.append(inp)
            owners.append(index)
            ratios.append(step.r)
    alpha, beta = tpm(TPMBatch.stack(inputs))
    per_step = beta_log_prob_tensor(alpha, beta, as_tensor(ratios))
    totals = torch.zeros(len(trajectories), dtype=per_step.dtype)
    return totals.index_add(0, torch.tensor(owners, dtype=torch.long), per_step)


def collect_group(condition: Condition, velocity_field: VelocityField, tpm: TimestepPredictor, grid: TimeGrid,
                  cfg: AsyncConfig, spec: RewardSpec, mixture: GaussianMixture, guidance: float,
                  group_size: int, seed: int, iteration: int) -> RolloutGroup:
    if not cfg.stochastic:
        raise UsageError("GRPO rollouts need stochastic ratio sampling")
    trajectories = [
        sample_async(velocity_field, tpm, grid, condition, guidance, cfg,
                     rngs.stream(seed, "rollout", iteration, member))
        for member in range(group_size)
    ]
    if cfg.batch_termination:
        check_batch_termination(trajectories)
    scores = zscore_normalize(
        score_samples([t.sample for t in trajectories], [condition] * group_size, spec, mixture), spec.eps_z
    )
    rewards = composite_reward(scores, spec.weights)
    for traj, reward, raw in zip(trajectories, rewards, scores.raw):
        traj.reward = float(reward)
        traj.scores = dict(zip(scores.names, map(float, raw)))
    old = np.array([trajectory_log_prob(t) for t in trajectories])
    return RolloutGroup(condition, trajectories, scores, rewards, old)


@dataclass
class TrainingResult:
    log: List[Dict[str, float]] = field(default_factory=list)
    skipped: List[int] = field(default_factory=list)
    saturation_warnings: int = 0


def train_tpm(config: TrainConfig, velocity_field: VelocityField, tpm: TimestepPredictor, store: ParameterStore,
              grid: TimeGrid, cfg: AsyncConfig, spec: RewardSpec, mixture: GaussianMixture, guidance: float,
              seed: int, optimizer: Optional[AdamState] = None, start_iteration: int = 0,
              on_iteration: Optional[Callable[[int, Dict[str, float]], None]] = None,
              on_checkpoint: Optional[Callable[[int], None]] = None, progress: bool = False) -> TrainingResult:
    if not tpm.initialized:
        raise UsageError("TPM must be initialized before training")
    optimizer = optimizer or AdamState(store, config.lr)
    result = TrainingResult()
    saturated = 0
    bound = cfg.deviation_bound

    for iteration in tqdm(range(start_iteration, config.iterations), disable=not progress, desc="train_tpm"):
        draw = rngs.stream(seed, "iteration", iteration)
        condition = Condition(int(draw.integers(mixture.components)))
        try:
            group = collect_group(condition, velocity_field, tpm, grid, cfg, spec, mixture, guidance,
                                  config.group_size, seed, iteration)
        except NumericError as exc:
            logger.warning("Iteration %d: rollout failed, group skipped (%s)", iteration, exc)
            result.skipped.append(iteration)
            continue

        advantages = torch.from_numpy(group_advantages(group.rewards, spec.eps_z))
        old = torch.from_numpy(group.old_log_probs)
        clip_fractions, grad_norms, overflow, first_ratio_gap = [], [], 0, None
        for _ in range(config.epochs):
            order = draw.permutation(config.group_size)
            for start in range(0, config.group_size, config.minibatch):
                members = order[start:start + config.minibatch]
                index = torch.from_numpy(members)
                logp_new = recompute_log_probs(tpm, [group.trajectories[i] for i in members])
                if first_ratio_gap is None:
                    first_ratio_gap = float((logp_new.detach() - old[index]).abs().max())
                objective, stats = ppo_clip_objective(logp_new, old[index], advantages[index], config.clip_eps)
                backward(-objective, store)
                grad_norms.append(store.grad_norm())
                clip_global_norm(store, config.max_grad_norm)
                adam_step(store, optimizer)
                clip_fractions.append(stats["clip_fraction"])
                overflow += stats["overflow"]

        deviation = mean_deviation(group.trajectories)
        mean_abs = float(np.mean([abs(s.deviation) for t in group.trajectories for s in t.steps]))
        saturated = saturated + 1 if bound > 0 and mean_abs >= bound * (1.0 - 1e-3) else 0
        if saturated == config.saturation_patience:
            result.saturation_warnings += 1
            logger.warning("Mean |deviation| has sat at its bound %.3f for %d iterations", bound, saturated)

        row = {
            "iter": iteration,
            "label": condition.label,
            "mean_reward": float(weighted_raw(group.scores, spec).mean()),
            "mean_deviation": deviation,
            "clip_fraction": float(np.mean(clip_fractions)),
            "grad_norm": float(np.mean(grad_norms)),
            "lr": optimizer.lr,
            "ratio_overflow": overflow,
            "first_ratio_gap": first_ratio_gap,
            **{f"raw_{name}": float(value) for name, value in zip(group.scores.names, group.scores.raw.mean(axis=0))},
        }
        result.log.append(row)
        if on_iteration:
            on_iteration(iteration, row)
        if on_checkpoint and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            on_checkpoint(iteration + 1)
    return result
