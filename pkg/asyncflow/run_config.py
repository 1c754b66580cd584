"""Run configuration: YAML files validated into pydantic models.

Unknown keys are rejected everywhere (``extra="forbid"``) so a typo in a
config never silently falls back to a default.
"""
from __future__ import annotations

import hashlib
import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "config"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "default.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TargetConfig(_Section):
    kind: Literal["point", "mixture"] = "mixture"
    dim: int = Field(2, gt=0)
    weights: List[float] = [0.5, 0.5]
    means: List[List[float]] = [[-2.0, 0.0], [2.0, 0.0]]
    stds: List[float] = [0.5, 0.5]

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.weights) != len(self.means):
            raise ValueError("target weights and means differ in length")
        if any(len(m) != self.dim for m in self.means):
            raise ValueError(f"every target mean must have dim={self.dim} entries")
        if len(self.stds) not in (1, len(self.means)):
            raise ValueError("stds must hold one value or one per component")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("target weights must be positive and sum to 1")
        if self.kind == "point" and any(s != 0 for s in self.stds):
            raise ValueError("point targets need zero stds")
        if self.kind == "mixture" and any(s <= 0 for s in self.stds):
            raise ValueError("mixture targets need positive stds")
        return self


class GridConfig(_Section):
    steps: int = Field(10, ge=1)
    kind: Literal["uniform", "shifted"] = "uniform"
    shift: float = Field(1.0, gt=0)


class AsyncSettings(_Section):
    guidance: float = 5.0
    gamma: float = Field(1.0, ge=0)
    bound: Literal["standard", "lifted"] = "standard"
    sigma_min: float = Field(1e-3, gt=0, lt=1)
    k_max: int = Field(10, ge=1)
    batch_termination: bool = False


class FieldSettings(_Section):
    hidden: int = Field(128, gt=0)
    depth: int = Field(3, gt=0)
    time_frequencies: int = Field(16, gt=0)
    condition_dim: int = Field(16, gt=0)
    iterations: int = Field(3000, ge=0)
    batch_size: int = Field(256, gt=0)
    lr: float = Field(1e-3, gt=0)
    uncond_prob: float = Field(0.1, ge=0, le=1)
    plateau_window: int = Field(500, gt=0)
    plateau_tol: float = Field(1e-3, ge=0)
    checkpoint_every: int = Field(1000, ge=0)


class TPMSettings(_Section):
    patch_size: int = Field(2, gt=0)
    width: int = Field(32, gt=0)
    layers: int = Field(4, gt=0)
    heads: int = Field(4, gt=0)
    ff_width: int = Field(64, gt=0)
    global_tokens: int = Field(2, gt=0)
    readout_hidden: int = Field(64, gt=0)
    positional: bool = True
    pad: bool = True


class MetricConfig(_Section):
    kind: Literal["logdensity", "noise_penalty", "alignment", "neg_distance", "detail"]
    weight: float = Field(1.0, gt=0)


class RewardConfig(_Section):
    eps_z: float = Field(1e-8, gt=0)
    metrics: List[MetricConfig] = [
        MetricConfig(kind="logdensity"),
        MetricConfig(kind="noise_penalty"),
        MetricConfig(kind="alignment"),
        MetricConfig(kind="neg_distance"),
    ]


class TrainSettings(_Section):
    iterations: int = Field(500, ge=0)
    group_size: int = Field(16, ge=2)
    minibatch: int = Field(4, ge=1)
    clip_eps: float = Field(0.2, gt=0, lt=1)
    lr: float = Field(2e-5, gt=0)
    max_grad_norm: float = Field(1.0, gt=0)
    epochs: int = Field(1, ge=1)
    checkpoint_every: int = Field(100, ge=0)
    saturation_patience: int = Field(50, ge=1)


class EvaluateSettings(_Section):
    rollouts: int = Field(256, ge=2)
    seed: int = 42


class SweepSettings(_Section):
    gammas: List[float] = [0.0, 0.5, 1.0, 2.0]
    seeds: List[int] = [42]


class AlternativeSettings(_Section):
    multipliers: List[float] = [0.5, 0.75, 1.0, 1.25, 1.5]


class OracleSettings(_Section):
    start: float = -0.5
    stop: float = 0.5
    step: float = Field(0.05, gt=0)
    seeds: List[int] = [0, 1, 2]
    max_iterations: int = Field(2000, ge=1)

    def deviations(self) -> List[float]:
        count = int(round((self.stop - self.start) / self.step))
        return [round(self.start + i * self.step, 12) for i in range(count + 1)]


class RunConfig(_Section):
    seed: int = 42
    output_dir: str = "runs"
    target: TargetConfig = TargetConfig()
    grid: GridConfig = GridConfig()
    sampler: AsyncSettings = AsyncSettings()
    field: FieldSettings = FieldSettings()
    tpm: TPMSettings = TPMSettings()
    rewards: RewardConfig = RewardConfig()
    train: TrainSettings = TrainSettings()
    evaluate: EvaluateSettings = EvaluateSettings()
    sweep: SweepSettings = SweepSettings()
    alternative: AlternativeSettings = AlternativeSettings()
    oracle: OracleSettings = OracleSettings()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.train.group_size % self.train.minibatch:
            raise ValueError("train.minibatch must divide train.group_size")
        if self.tpm.width % self.tpm.heads:
            raise ValueError("tpm.width must be divisible by tpm.heads")
        if self.target.dim % self.tpm.patch_size and not self.tpm.pad:
            raise ValueError("target.dim must be divisible by tpm.patch_size when padding is off")
        if self.target.kind == "point" and any(m.kind == "logdensity" for m in self.rewards.metrics):
            raise ValueError("the logdensity metric needs a mixture target with positive stds")
        return self


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigurationError(f"invalid run configuration:\n{exc}") from exc


@lru_cache(maxsize=None)
def _load_yaml(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        data = yaml.safe_load(handle) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    path = Path(path or DEFAULT_CONFIG_PATH)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        data = _load_yaml(str(path.resolve()))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: malformed YAML: {exc}") from exc
    logger.debug("Loaded run config from %s", path)
    return parse_config(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)


def config_hash(config: RunConfig, *sections: str) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON of ``sections`` (or all)."""
    data = config.model_dump(mode="json")
    if sections:
        data = {name: data[name] for name in sections}
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


FIELD_SECTIONS = ("seed", "target", "field")
TPM_SECTIONS = FIELD_SECTIONS + ("grid", "sampler", "tpm", "rewards", "train")
