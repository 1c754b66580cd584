"""Experiment orchestration shared by the management commands.

Builders turn a ``RunConfig`` into engine objects; the run functions below
are what each command does, minus argument parsing and file output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from . import rng as rngs
from .checkpoint import load_checkpoint, save_checkpoint, split_namespace
from .exceptions import NumericError, UsageError, VersionError
from .flowcore import Condition, GaussianMixture, LearnedField, NULL, TimeGrid, fm_loss, make_time_grid
from .grpo import TrainConfig, TrainingResult, train_tpm
from .kernel import AdamState, ParameterStore, adam_step, backward, clip_global_norm
from .rewards import BatchScores, MetricSpec, RewardSpec, composite_reward, score_samples, zscore_normalize
from .run_config import RunConfig
from .sampler import (
    AsyncConfig,
    Trajectory,
    constant_deviation,
    mean_deviation,
    sample_alternative,
    sample_async,
    sample_sync,
)
from .tpm import Policy, TimestepPredictor, TPMConfig

logger = logging.getLogger(__name__)

LOSS_CHECK_ITERATIONS = 100


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_mixture(config: RunConfig) -> GaussianMixture:
    target = config.target
    return GaussianMixture.isotropic(target.weights, target.means, target.stds)


def build_grid(config: RunConfig) -> TimeGrid:
    return make_time_grid(config.grid.steps, config.grid.kind, config.grid.shift)


def build_async(config: RunConfig, stochastic: bool = False, **overrides) -> AsyncConfig:
    s = config.sampler
    values = dict(gamma=s.gamma, bound=s.bound, sigma_min=s.sigma_min, k_max=s.k_max,
                  stochastic=stochastic, batch_termination=s.batch_termination)
    values.update(overrides)
    return AsyncConfig(**values)


def build_reward_spec(config: RunConfig) -> RewardSpec:
    return RewardSpec(tuple(MetricSpec(m.kind, m.weight) for m in config.rewards.metrics), config.rewards.eps_z)


def build_train_config(config: RunConfig, iterations: Optional[int] = None) -> TrainConfig:
    values = config.train.model_dump()
    if iterations is not None:
        values["iterations"] = iterations
    return TrainConfig(**values)


def build_field(config: RunConfig) -> Tuple[LearnedField, ParameterStore]:
    f = config.field
    model = LearnedField(config.target.dim, len(config.target.means), hidden=f.hidden, depth=f.depth,
                         time_frequencies=f.time_frequencies, condition_dim=f.condition_dim)
    model.reset_parameters(rngs.torch_generator(config.seed, "init", "field"))
    return model, ParameterStore(model, "field")


def build_tpm(config: RunConfig) -> Tuple[TimestepPredictor, ParameterStore]:
    t = config.tpm
    tpm_config = TPMConfig(
        dim=config.target.dim, num_classes=len(config.target.means), patch_size=t.patch_size, width=t.width,
        layers=t.layers, heads=t.heads, ff_width=t.ff_width, global_tokens=t.global_tokens,
        readout_hidden=t.readout_hidden, k_max=config.sampler.k_max, positional=t.positional, pad=t.pad,
    )
    model = TimestepPredictor(tpm_config)
    model.reset_parameters(rngs.torch_generator(config.seed, "init", "tpm"))
    return model, ParameterStore(model, "tpm")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

# stream each training loop draws its next iteration from
RESUME_STREAMS = {"field": "field", "tpm": "iteration"}


def save_model(path: Path, kind: str, config: RunConfig, store: ParameterStore,
               optimizer: Optional[AdamState] = None, **metadata) -> Path:
    purpose = RESUME_STREAMS[kind]
    resume_at = int(metadata.get("iteration", 0))
    entries = store.state_entries()
    if optimizer is not None:
        entries.update(optimizer.state_entries())
    meta = {
        "kind": kind,
        "config": config.model_dump(mode="json"),
        "adam_step": optimizer.step_count if optimizer is not None else 0,
        "rng": {
            "algorithm": "philox",
            "seed": config.seed,
            "stream": [purpose, resume_at],
            "state": rngs.describe_state(rngs.stream(config.seed, purpose, resume_at)),
        },
        **metadata,
    }
    return save_checkpoint(path, entries, meta)


def load_model(path: Path, kind: str, store: ParameterStore,
               optimizer: Optional[AdamState] = None) -> Dict:
    entries, metadata = load_checkpoint(path)
    if metadata.get("kind") != kind:
        raise VersionError(f"{path} holds a {metadata.get('kind')!r} checkpoint, expected {kind!r}")
    store.load_entries(split_namespace(entries, store.namespace))
    if optimizer is not None:
        optimizer.load_entries(entries, int(metadata.get("adam_step", 0)))
    return metadata


def load_frozen_field(config: RunConfig, path: Path) -> LearnedField:
    if not Path(path).exists():
        raise UsageError(f"field checkpoint {path} does not exist; run pretrain_field first")
    model, store = build_field(config)
    load_model(path, "field", store)
    store.freeze()
    model.eval()
    return model


def load_trained_tpm(config: RunConfig, path: Path) -> TimestepPredictor:
    if not Path(path).exists():
        raise UsageError(f"TPM checkpoint {path} does not exist; run train_tpm first")
    model, store = build_tpm(config)
    load_model(path, "tpm", store)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Field pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    losses: List[float]
    iterations: int
    plateaued: bool = False


def field_batch(config: RunConfig, mixture: GaussianMixture, iteration: int):
    draw = rngs.stream(config.seed, "field", iteration)
    n = config.field.batch_size
    labels = mixture.draw_labels(draw, n)
    x0 = mixture.sample(draw, labels)
    eps = torch.from_numpy(draw.standard_normal((n, mixture.dim)))
    t = torch.from_numpy(draw.random(n))
    dropped = draw.random(n) < config.field.uncond_prob
    conditions = [NULL if drop else Condition(int(label)) for label, drop in zip(labels, dropped)]
    return x0, eps, t, conditions


def pretrain_field(config: RunConfig, model: LearnedField, store: ParameterStore, optimizer: AdamState,
                   losses: Optional[List[float]] = None, start_iteration: int = 0,
                   on_checkpoint=None, progress: bool = False) -> PretrainResult:
    mixture = build_mixture(config)
    settings = config.field
    losses = list(losses or [])
    window = settings.plateau_window
    done = start_iteration
    for iteration in tqdm(range(start_iteration, settings.iterations), disable=not progress, desc="pretrain_field"):
        x0, eps, t, conditions = field_batch(config, mixture, iteration)
        loss = fm_loss(model, x0, eps, t, conditions)
        backward(loss, store)
        clip_global_norm(store, config.train.max_grad_norm)
        adam_step(store, optimizer)
        losses.append(float(loss))
        done = iteration + 1

        if iteration + 1 == LOSS_CHECK_ITERATIONS:
            early, late = np.mean(losses[:10]), np.mean(losses[-10:])
            if not late < early:
                raise NumericError(
                    f"field loss did not decrease over the first {LOSS_CHECK_ITERATIONS} iterations "
                    f"(first 10 mean {early:.6g}, last 10 mean {late:.6g}); check field.lr and the target"
                )
        if on_checkpoint and settings.checkpoint_every and (iteration + 1) % settings.checkpoint_every == 0:
            on_checkpoint(iteration + 1, losses)
        if len(losses) >= 2 * window and (len(losses) % window) == 0:
            previous = np.mean(losses[-2 * window:-window])
            current = np.mean(losses[-window:])
            if (previous - current) < settings.plateau_tol * previous:
                logger.info("Field loss plateaued at iteration %d (%.6g -> %.6g)", iteration + 1, previous, current)
                return PretrainResult(losses, done, plateaued=True)
    return PretrainResult(losses, done)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    mode: str
    trajectories: List[Trajectory]
    scores: BatchScores
    composite: np.ndarray
    knob: float = 0.0

    @property
    def mean_composite(self) -> float:
        return float(self.composite.mean())

    @property
    def mean_deviation(self) -> float:
        return mean_deviation(self.trajectories) if any(t.steps for t in self.trajectories) else 0.0

    def metric_means(self) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(self.scores.names, self.scores.raw.mean(axis=0))}

    def summary(self) -> Dict[str, float]:
        return {
            "mode": self.mode,
            "knob": float(self.knob),
            "rollouts": len(self.trajectories),
            "composite": self.mean_composite,
            "mean_deviation": self.mean_deviation,
            **self.metric_means(),
        }

    def sample_rows(self) -> List[Dict]:
        rows = []
        for index, (traj, composite) in enumerate(zip(self.trajectories, self.composite)):
            row = {
                "sample": index,
                "label": traj.condition.label,
                "composite": float(composite),
                "mean_deviation": mean_deviation([traj]) if traj.steps else 0.0,
            }
            row.update({name: float(v) for name, v in zip(self.scores.names, self.scores.raw[index])})
            row.update({f"y{j}": float(v) for j, v in enumerate(traj.sample)})
            rows.append(row)
        return rows


@dataclass
class EvaluationContext:
    """Field, target, grid and reward settings shared by every evaluated mode."""

    config: RunConfig
    velocity_field: object
    mixture: GaussianMixture = field(init=False)
    grid: TimeGrid = field(init=False)
    spec: RewardSpec = field(init=False)
    _reference: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, init=False, repr=False)
    _baseline: Optional[Evaluation] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.mixture = build_mixture(self.config)
        self.grid = build_grid(self.config)
        self.spec = build_reward_spec(self.config)

    @property
    def rollouts(self) -> int:
        return self.config.evaluate.rollouts

    def conditions(self) -> List[Condition]:
        return [Condition(i % self.mixture.components) for i in range(self.rollouts)]

    def _stream(self, seed: int, index: int) -> np.random.Generator:
        return rngs.stream(seed, "eval", index)

    def _finish(self, mode: str, trajectories: List[Trajectory], knob: float = 0.0) -> Evaluation:
        raw = score_samples([t.sample for t in trajectories], self.conditions(), self.spec, self.mixture)
        scores = zscore_normalize(raw, self.spec.eps_z, reference=self.reference())
        composite = composite_reward(scores, self.spec.weights)
        for traj, reward in zip(trajectories, composite):
            traj.reward = float(reward)
        return Evaluation(mode, trajectories, scores, composite, knob)

    def baseline(self, seed: Optional[int] = None) -> Evaluation:
        seed = self.config.evaluate.seed if seed is None else seed
        guidance = self.config.sampler.guidance
        trajectories = [
            sample_sync(self.velocity_field, self.grid, c, guidance, self._stream(seed, i))
            for i, c in enumerate(self.conditions())
        ]
        raw = score_samples([t.sample for t in trajectories], self.conditions(), self.spec, self.mixture)
        if self._reference is None:
            self._reference = raw.column_stats()
        return self._finish("sync", trajectories)

    def reference(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._reference is None:
            self.baseline()
        return self._reference

    def run_async(self, policy: Policy, cfg: AsyncConfig, seed: Optional[int] = None, knob: float = 0.0,
                  mode: str = "async") -> Evaluation:
        seed = self.config.evaluate.seed if seed is None else seed
        guidance = self.config.sampler.guidance
        trajectories = [
            sample_async(self.velocity_field, policy, self.grid, c, guidance, cfg, self._stream(seed, i))
            for i, c in enumerate(self.conditions())
        ]
        return self._finish(mode, trajectories, knob)

    def run_alternative(self, scaler, seed: Optional[int] = None, knob: float = 1.0) -> Evaluation:
        seed = self.config.evaluate.seed if seed is None else seed
        guidance = self.config.sampler.guidance
        trajectories = [
            sample_alternative(self.velocity_field, self.grid, c, guidance, scaler, self._stream(seed, i))
            for i, c in enumerate(self.conditions())
        ]
        return self._finish("alternative", trajectories, knob)


def constant_deviation_search(context: EvaluationContext, deviations: Sequence[float], bound: str = "standard",
                              progress: bool = False) -> List[Tuple[float, float]]:
    """Mean composite reward with the deviation pinned to each value; the brute-force oracle."""
    base = build_async(context.config, bound=bound, gamma=1.0)
    results = []
    for d in tqdm(deviations, disable=not progress, desc="oracle grid"):
        policy, cfg = constant_deviation(d, base)
        results.append((float(d), context.run_async(policy, cfg, knob=d).mean_composite))
    return results


def best_deviation(results: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    return max(results, key=lambda item: item[1])


# ---------------------------------------------------------------------------
# TPM training and the oracle-recovery experiment
# ---------------------------------------------------------------------------

def run_tpm_training(config: RunConfig, velocity_field, iterations: Optional[int] = None,
                     on_iteration=None, on_checkpoint=None, progress: bool = False
                     ) -> Tuple[TimestepPredictor, ParameterStore, AdamState, TrainingResult]:
    train_config = build_train_config(config, iterations)
    model, store = build_tpm(config)
    optimizer = AdamState(store, train_config.lr)
    result = train_tpm(
        train_config, velocity_field, model, store, build_grid(config), build_async(config, stochastic=True),
        build_reward_spec(config), build_mixture(config), config.sampler.guidance, config.seed,
        optimizer=optimizer, on_iteration=on_iteration,
        on_checkpoint=(lambda it: on_checkpoint(it, store, optimizer)) if on_checkpoint else None,
        progress=progress,
    )
    return model, store, optimizer, result


@dataclass
class OracleOutcome:
    seed: int
    bound: str
    best_deviation: float
    best_reward: float
    tpm_reward: float
    tpm_deviation: float
    tpm_abs_deviation: float

    @property
    def reward_ratio(self) -> float:
        return self.tpm_reward / self.best_reward if self.best_reward else float("nan")

    @property
    def recovered(self) -> bool:
        return self.tpm_reward >= 0.95 * self.best_reward and abs(self.tpm_deviation - self.best_deviation) <= 0.1


def oracle_recovery(config: RunConfig, velocity_field, seeds: Sequence[int], bound: str = "standard",
                    progress: bool = False) -> Tuple[List[Tuple[float, float]], List[OracleOutcome]]:
    """Grid-search the best constant deviation, then check GRPO-trained TPMs against it."""
    context = EvaluationContext(config, velocity_field)
    unit = 0.5 if bound == "standard" else 1.0
    grid = config.oracle.deviations()
    if bound == "lifted":
        grid = [2.0 * d for d in grid]
    search = constant_deviation_search(context, grid, bound=bound, progress=progress)
    d_star, best = best_deviation(search)
    logger.info("Oracle optimum for %s bound: d*=%.3f, reward %.6g", bound, d_star, best)

    outcomes = []
    for seed in seeds:
        run_cfg = config.model_copy(update={
            "seed": seed,
            "sampler": config.sampler.model_copy(update={"bound": bound, "gamma": 1.0}),
        })
        model, _, _, _ = run_tpm_training(run_cfg, velocity_field, iterations=config.oracle.max_iterations,
                                          progress=progress)
        evaluation = context.run_async(model, build_async(run_cfg, stochastic=False))
        abs_dev = float(np.mean([abs(s.deviation) for t in evaluation.trajectories for s in t.steps]))
        outcomes.append(OracleOutcome(seed, bound, d_star, best, evaluation.mean_composite,
                                      evaluation.mean_deviation, abs_dev))
        logger.info("Seed %d: TPM reward %.6g (%.1f%% of oracle), deviation %.3f vs d*=%.3f (bound %.1f)",
                    seed, evaluation.mean_composite, 100 * outcomes[-1].reward_ratio,
                    evaluation.mean_deviation, d_star, unit)
    return search, outcomes
