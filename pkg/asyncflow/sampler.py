"""Euler samplers: synchronous, asynchronous (TPM-driven) and velocity-scaled.

In the asynchronous sampler the latent is always advanced with the input
grid interval ``t_{k+1} - t_k``; only the time the field is *conditioned* on
(the pseudo-timestep ``t*``) moves.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Tuple, Union

import numpy as np
import torch

from .exceptions import AsyncFlowError, ConfigurationError, DomainError, UsageError
from .flowcore import NULL, Condition, TimeGrid, VelocityField, clean_estimate
from .tpm import (
    ConstantRatioPolicy,
    FixedRatio,
    Policy,
    TimestepPredictor,
    TPMInput,
    beta_log_prob,
    beta_mode,
    beta_sample,
)

logger = logging.getLogger(__name__)

BOUNDS = ("standard", "lifted")


@dataclass(frozen=True)
class AsyncConfig:
    gamma: float = 1.0
    bound: str = "standard"
    sigma_min: float = 1e-3
    k_max: int = 10
    stochastic: bool = True
    batch_termination: bool = False

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ConfigurationError(f"deviation scale must be >= 0, got {self.gamma}")
        if self.bound not in BOUNDS:
            raise ConfigurationError(f"bound mode must be one of {BOUNDS}, got {self.bound!r}")
        if not 0.0 < self.sigma_min < 1.0:
            raise ConfigurationError(f"sigma_min must lie in (0, 1), got {self.sigma_min}")
        if self.k_max < 1:
            raise ConfigurationError(f"k_max must be positive, got {self.k_max}")

    @property
    def deviation_bound(self) -> float:
        return self.gamma * (0.5 if self.bound == "standard" else 1.0)

    def deviation(self, r: float) -> float:
        """Scaled deviation D; the multiplier on the grid interval is 1 + D."""
        base = r - 0.5 if self.bound == "standard" else 2.0 * r - 1.0
        return base * self.gamma


@dataclass
class StepRecord:
    k: int
    t_k: float
    t_next: float
    t_star: float
    x_before: torch.Tensor
    x_after: torch.Tensor
    velocity: torch.Tensor
    clean: torch.Tensor
    t_star_next: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    r: Optional[float] = None
    log_prob: Optional[float] = None
    deviation: float = 0.0
    clamped: bool = False


@dataclass
class Trajectory:
    steps: List[StepRecord]
    sample: torch.Tensor
    grid: TimeGrid
    condition: Condition
    guidance: float
    mode: str
    final_velocity: Optional[torch.Tensor] = None
    final_t_star: Optional[float] = None
    reward: Optional[float] = None
    scores: dict = field(default_factory=dict)

    def tpm_inputs(self) -> List[TPMInput]:
        return [
            TPMInput(s.x_before, s.velocity, s.t_star, s.clean, self.condition, s.k)
            for s in self.steps
        ]


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, guidance: float) -> torch.Tensor:
    if v_cond.shape != v_uncond.shape:
        raise ConfigurationError("conditional and unconditional velocities differ in shape")
    return v_uncond + guidance * (v_cond - v_uncond)


def guided_velocity(velocity_field: VelocityField, x: torch.Tensor, t: float, condition: Condition,
                    guidance: float) -> torch.Tensor:
    with torch.no_grad():
        v_cond = velocity_field(x, t, condition)
        v_uncond = velocity_field(x, t, NULL)
    return cfg_combine(v_cond, v_uncond, guidance)


@contextlib.contextmanager
def _at_step(k: int):
    try:
        yield
    except AsyncFlowError as exc:
        raise type(exc)(f"step {k}: {exc}") from exc


def pseudo_timestep(t_k: float, t_next: float, r: float, cfg: AsyncConfig) -> float:
    if not t_k > t_next:
        raise DomainError(f"grid pair ({t_k}, {t_next}) is not decreasing")
    if not 0.0 <= r <= 1.0:
        raise DomainError(f"ratio must lie in [0, 1], got {r}")
    eta = 1.0 + cfg.deviation(r)
    # eta == 1 must reproduce the grid point bitwise
    raw = t_next if eta == 1.0 else t_k + eta * (t_next - t_k)
    return max(cfg.sigma_min, raw)


def initial_latent(dim: int, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(dim))


def sample_sync(velocity_field: VelocityField, grid: TimeGrid, condition: Condition, guidance: float,
                rng: np.random.Generator) -> Trajectory:
    x = initial_latent(velocity_field.dim, rng)
    steps = []
    for k in range(grid.steps):
        t_k, t_next = grid[k], grid[k + 1]
        with _at_step(k):
            v = guided_velocity(velocity_field, x, t_k, condition, guidance)
        x_next = x + (t_next - t_k) * v
        steps.append(StepRecord(k, t_k, t_next, t_k, x, x_next, v, clean_estimate(x, t_k, v), t_star_next=t_next))
        x = x_next
    return Trajectory(steps, x, grid, condition, guidance, mode="sync")


def _decide(policy: Policy, inp: TPMInput, stochastic: bool, rng: np.random.Generator):
    decision = policy.predict(inp)
    if isinstance(decision, FixedRatio):
        return decision.r, None
    r = beta_sample(decision, rng) if stochastic else beta_mode(decision)
    return r, decision


def sample_async(velocity_field: VelocityField, policy: Policy, grid: TimeGrid, condition: Condition,
                 guidance: float, cfg: AsyncConfig, rng: np.random.Generator) -> Trajectory:
    x = initial_latent(velocity_field.dim, rng)
    t_star = grid[0]
    steps: List[StepRecord] = []
    for k in range(min(cfg.k_max, grid.steps)):
        t_k, t_next = grid[k], grid[k + 1]
        with _at_step(k):
            v = guided_velocity(velocity_field, x, t_star, condition, guidance)
            clean = clean_estimate(x, t_k, v)
            r, params = _decide(policy, TPMInput(x, v, t_star, clean, condition, k), cfg.stochastic, rng)
            t_star_next = pseudo_timestep(t_k, t_next, r, cfg)
        x_next = x + (t_next - t_k) * v
        record = StepRecord(
            k, t_k, t_next, t_star, x, x_next, v, clean,
            t_star_next=t_star_next, r=r, deviation=cfg.deviation(r),
            clamped=t_star_next == cfg.sigma_min,
        )
        if params is not None:
            record.alpha, record.beta = params.alpha, params.beta
            record.log_prob = beta_log_prob(params, r)
        steps.append(record)
        x, t_star = x_next, t_star_next
        if t_next < cfg.sigma_min:
            break
    t_last = grid[len(steps)]
    with _at_step(len(steps)):
        v_final = guided_velocity(velocity_field, x, t_star, condition, guidance)
    y = x - t_last * v_final
    return Trajectory(steps, y, grid, condition, guidance, mode="async",
                      final_velocity=v_final, final_t_star=t_star)


def sample_alternative(velocity_field: VelocityField, grid: TimeGrid, condition: Condition, guidance: float,
                       scaler: Union[float, Policy], rng: np.random.Generator,
                       stochastic: bool = False) -> Trajectory:
    """Synchronous conditioning with the Euler step scaled by ``w = 0.5 + r`` (or a constant)."""
    if not isinstance(scaler, (int, float)) and not hasattr(scaler, "predict"):
        raise UsageError("scaler must be a constant multiplier or a policy")
    if isinstance(scaler, (int, float)) and not 0.5 <= scaler <= 1.5:
        raise DomainError(f"velocity multiplier must lie in [0.5, 1.5], got {scaler}")
    x = initial_latent(velocity_field.dim, rng)
    steps = []
    for k in range(grid.steps):
        t_k, t_next = grid[k], grid[k + 1]
        with _at_step(k):
            v = guided_velocity(velocity_field, x, t_k, condition, guidance)
            clean = clean_estimate(x, t_k, v)
            params = None
            if isinstance(scaler, (int, float)):
                multiplier = float(scaler)
                r = multiplier - 0.5
            else:
                # grids longer than k_max reuse the last step feature
                feature = min(k, scaler.config.k_max - 1) if isinstance(scaler, TimestepPredictor) else k
                r, params = _decide(scaler, TPMInput(x, v, t_k, clean, condition, feature), stochastic, rng)
                multiplier = 0.5 + r
        x_next = x + (t_next - t_k) * v * multiplier
        record = StepRecord(k, t_k, t_next, t_k, x, x_next, v, clean, t_star_next=t_next,
                            r=r, deviation=multiplier - 1.0)
        if params is not None:
            record.alpha, record.beta = params.alpha, params.beta
            record.log_prob = beta_log_prob(params, r)
        steps.append(record)
        x = x_next
    return Trajectory(steps, x, grid, condition, guidance, mode="alternative")


def mean_deviation(trajectories: Iterable[Trajectory]) -> float:
    values = [step.deviation for traj in trajectories for step in traj.steps]
    if not values:
        raise DomainError("mean deviation of an empty set of steps")
    # +0.0 folds a negative zero (gamma=0) into 0.0
    return float(np.mean(values)) + 0.0


def constant_deviation(deviation: float, cfg: AsyncConfig) -> Tuple[ConstantRatioPolicy, AsyncConfig]:
    """Policy and config whose scaled deviation is ``deviation`` at every step.

    The scale is widened when the deviation lies outside the unit bound, so
    that e.g. 4x an optimum can still be evaluated.
    """
    unit = 0.5 if cfg.bound == "standard" else 1.0
    gamma = max(1.0, abs(deviation) / unit)
    per_unit = 1.0 if cfg.bound == "standard" else 2.0
    r = 0.5 + deviation / (per_unit * gamma)
    return ConstantRatioPolicy(min(max(r, 0.0), 1.0)), replace(cfg, gamma=gamma, stochastic=False)


def check_batch_termination(trajectories: List[Trajectory]) -> None:
    """Group members share one grid, so they must stop on the same step."""
    lengths = {len(t.steps) for t in trajectories}
    if len(lengths) > 1:
        raise UsageError(f"group members terminated after different step counts: {sorted(lengths)}")
