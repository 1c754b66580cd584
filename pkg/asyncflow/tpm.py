"""Timestep Prediction Module and its Beta action head.

The TPM reads the current latent, the guided velocity, the clean estimate,
the condition, the conditioning time and the step index as one token
sequence, and emits the two Beta parameters of the ratio ``r`` that places
the next pseudo-timestep.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, DomainError, NumericError, UsageError
from .flowcore import Condition, embed_conditions, sinusoidal_embedding
from .kernel import DTYPE, Dense, Encoder, EncoderConfig, ParameterStore, as_tensor, encoder_forward

logger = logging.getLogger(__name__)

R_EPS = 1e-9


# ---------------------------------------------------------------------------
# Beta head
# ---------------------------------------------------------------------------

def phi(x):
    """Positivity map: ``2 + x + x^2/2`` for x > 0, ``1 + e^x`` otherwise.

    Accepts floats or tensors. Both branches are evaluated on clamped inputs
    so the unused branch never produces inf/nan gradients.
    """
    if not isinstance(x, torch.Tensor):
        x = float(x)
        return 2.0 + x + 0.5 * x * x if x > 0 else 1.0 + math.exp(x)
    pos = x.clamp(min=0.0)
    neg = x.clamp(max=0.0)
    return torch.where(x > 0, 2.0 + pos + 0.5 * pos * pos, 1.0 + torch.exp(neg))


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha >= 1.0 and self.beta >= 1.0) or not math.isfinite(self.alpha + self.beta):
            raise DomainError(f"Beta parameters must be finite and >= 1, got ({self.alpha}, {self.beta})")


def beta_log_prob_tensor(alpha: torch.Tensor, beta: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    log_norm = torch.lgamma(alpha) + torch.lgamma(beta) - torch.lgamma(alpha + beta)
    return (alpha - 1.0) * torch.log(r) + (beta - 1.0) * torch.log1p(-r) - log_norm


def beta_log_prob(params: BetaParams, r: float) -> float:
    if not 0.0 < r < 1.0:
        raise DomainError(f"Beta log-density needs r in (0, 1), got {r}")
    return float(beta_log_prob_tensor(as_tensor(params.alpha), as_tensor(params.beta), as_tensor(r)))


def beta_sample(params: BetaParams, rng: np.random.Generator) -> float:
    """Exact Beta draw as a ratio of two Gamma draws, clamped to [R_EPS, 1 - R_EPS]."""
    g1 = rng.standard_gamma(params.alpha)
    g2 = rng.standard_gamma(params.beta)
    total = g1 + g2
    r = g1 / total if total > 0 else 0.5
    clamped = min(max(r, R_EPS), 1.0 - R_EPS)
    if clamped != r:
        logger.debug("Beta draw %.3e clamped to %.3e", r, clamped)
    return float(clamped)


def beta_mode(params: BetaParams) -> float:
    """Density peak, kept inside [R_EPS, 1 - R_EPS] like the sampled draws."""
    denominator = params.alpha + params.beta - 2.0
    if denominator <= 0.0:
        return 0.5
    return min(max((params.alpha - 1.0) / denominator, R_EPS), 1.0 - R_EPS)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TPMInput:
    x: torch.Tensor
    v: torch.Tensor
    t_star: float
    clean: torch.Tensor
    condition: Condition
    k: int

    def __post_init__(self):
        if not (self.x.shape == self.v.shape == self.clean.shape) or self.x.dim() != 1:
            raise ConfigurationError("TPM latent, velocity and clean estimate must share one dimension")
        if not 0.0 < self.t_star <= 1.0:
            raise DomainError(f"TPM conditioning time must lie in (0, 1], got {self.t_star}")
        if self.k < 0:
            raise DomainError(f"negative step index {self.k}")


@dataclass
class TPMBatch:
    x: torch.Tensor
    v: torch.Tensor
    clean: torch.Tensor
    t_star: torch.Tensor
    k: torch.Tensor
    conditions: List[Condition]

    @classmethod
    def stack(cls, inputs: Sequence[TPMInput]) -> "TPMBatch":
        if not inputs:
            raise UsageError("cannot batch zero TPM inputs")
        return cls(
            x=torch.stack([i.x for i in inputs]),
            v=torch.stack([i.v for i in inputs]),
            clean=torch.stack([i.clean for i in inputs]),
            t_star=as_tensor([i.t_star for i in inputs]),
            k=as_tensor([float(i.k) for i in inputs]),
            conditions=[i.condition for i in inputs],
        )

    def __len__(self) -> int:
        return self.x.shape[0]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TPMConfig:
    dim: int
    num_classes: int
    patch_size: int = 4
    width: int = 32
    layers: int = 4
    heads: int = 4
    ff_width: int = 64
    global_tokens: int = 2
    readout_hidden: int = 64
    k_max: int = 10
    positional: bool = True
    pad: bool = True
    time_frequencies: int = 16

    def __post_init__(self):
        if self.dim <= 0 or self.patch_size <= 0 or self.global_tokens <= 0 or self.k_max <= 0:
            raise ConfigurationError("TPM dim, patch size, global tokens and k_max must be positive")
        if self.dim % self.patch_size and not self.pad:
            raise ConfigurationError(
                f"dimension {self.dim} is not divisible by patch size {self.patch_size} and padding is off"
            )

    @property
    def patches(self) -> int:
        return -(-self.dim // self.patch_size)

    @property
    def tokens(self) -> int:
        return 3 * self.patches + 3 + self.global_tokens

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(layers=self.layers, width=self.width, heads=self.heads, ff_width=self.ff_width)


class TimestepPredictor(nn.Module):
    STREAMS = ("x", "v", "clean")

    def __init__(self, config: TPMConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.stream_proj = nn.ModuleList(Dense(config.patch_size, w) for _ in self.STREAMS)
        self.stream_type = nn.Parameter(torch.zeros(len(self.STREAMS), w, dtype=DTYPE))
        self.condition_table = nn.Parameter(torch.zeros(config.num_classes, w, dtype=DTYPE))
        self.time_proj = Dense(2 * config.time_frequencies, w)
        self.step_proj = Dense(2 * config.time_frequencies, w)
        self.global_tokens = nn.Parameter(torch.zeros(config.global_tokens, w, dtype=DTYPE))
        if config.positional:
            self.positional = nn.Parameter(torch.zeros(config.tokens, w, dtype=DTYPE))
        else:
            self.register_parameter("positional", None)
        self.encoder = Encoder(config.encoder)
        self.readout_hidden = Dense(config.global_tokens * w, config.readout_hidden)
        self.readout = Dense(config.readout_hidden, 2)
        self.initialized = False

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Fan-in uniform dense layers, N(0, 0.02) embeddings, zero final readout."""
        for layer in [*self.stream_proj, self.time_proj, self.step_proj, *self.encoder.dense_layers(),
                      self.readout_hidden]:
            layer.reset_parameters(generator)
        self.readout.reset_parameters(generator, zero=True)
        with torch.no_grad():
            embeddings = [self.stream_type, self.condition_table, self.global_tokens]
            if self.positional is not None:
                embeddings.append(self.positional)
            for table in embeddings:
                table.normal_(0.0, 0.02, generator=generator)
        self.initialized = True

    def _patches(self, tensor: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if tensor.shape[-1] != cfg.dim:
            raise ConfigurationError(f"TPM expects dimension {cfg.dim}, got {tensor.shape[-1]}")
        missing = cfg.patches * cfg.patch_size - cfg.dim
        if missing:
            tensor = F.pad(tensor, (0, missing))
        return tensor.reshape(tensor.shape[0], cfg.patches, cfg.patch_size)

    def tokenize(self, batch: TPMBatch) -> torch.Tensor:
        cfg = self.config
        if (batch.k >= cfg.k_max).any():
            raise DomainError(f"step index beyond k_max={cfg.k_max}")
        n = len(batch)
        streams = [
            proj(self._patches(tensor)) + self.stream_type[index]
            for index, (proj, tensor) in enumerate(zip(self.stream_proj, (batch.x, batch.v, batch.clean)))
        ]
        condition = embed_conditions(self.condition_table, batch.conditions).unsqueeze(1)
        temporal = self.time_proj(sinusoidal_embedding(batch.t_star, cfg.time_frequencies)).unsqueeze(1)
        step = self.step_proj(sinusoidal_embedding(batch.k / cfg.k_max, cfg.time_frequencies)).unsqueeze(1)
        glob = self.global_tokens.unsqueeze(0).expand(n, -1, -1)
        tokens = torch.cat([*streams, condition, temporal, step, glob], dim=1)
        if self.positional is not None:
            tokens = tokens + self.positional
        return tokens

    def forward(self, batch: TPMBatch) -> Tuple[torch.Tensor, torch.Tensor]:
        if not self.initialized:
            raise UsageError("TPM parameters have not been initialized or loaded")
        hidden = encoder_forward(self.tokenize(batch), self.encoder)
        glob = hidden[:, -self.config.global_tokens:, :].reshape(len(batch), -1)
        raw = self.readout(F.silu(self.readout_hidden(glob)))
        alpha, beta = phi(raw[:, 0]), phi(raw[:, 1])
        if not (torch.isfinite(alpha).all() and torch.isfinite(beta).all()):
            raise NumericError("TPM produced non-finite Beta parameters")
        return alpha, beta

    def predict(self, inp: TPMInput) -> BetaParams:
        with torch.no_grad():
            alpha, beta = self(TPMBatch.stack([inp]))
        return BetaParams(float(alpha[0]), float(beta[0]))


def tokenize(inp: TPMInput, store: ParameterStore) -> torch.Tensor:
    return _module(store).tokenize(TPMBatch.stack([inp]))[0]


def tpm_forward(inp: TPMInput, store: ParameterStore) -> BetaParams:
    return _module(store).predict(inp)


def _module(store: ParameterStore) -> TimestepPredictor:
    if not isinstance(store.module, TimestepPredictor) or not store.initialized:
        raise UsageError("TPM store is not initialized")
    return store.module


# ---------------------------------------------------------------------------
# Fixed-ratio policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedRatio:
    """A non-random action: the sampler uses ``r`` as is and records no density."""

    r: float


class ConstantRatioPolicy:
    """Policy returning the same ratio at every step (oracle grid search, pinned runs)."""

    def __init__(self, r: float):
        if not 0.0 <= r <= 1.0:
            raise DomainError(f"ratio must lie in [0, 1], got {r}")
        self.r = float(r)

    def predict(self, inp: TPMInput) -> FixedRatio:
        return FixedRatio(self.r)


Policy = Union[TimestepPredictor, ConstantRatioPolicy]
Decision = Union[BetaParams, FixedRatio]
