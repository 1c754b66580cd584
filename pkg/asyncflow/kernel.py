"""Small float64 deep-learning kernel shared by the velocity field and the TPM.

Everything here is plain ``torch`` in double precision:

* ``Dense``/``dense_forward``: affine maps with shape and finiteness checks.
* ``Encoder``/``encoder_forward``: a shallow self-attention + feed-forward
  stack with residual connections and no normalisation or dropout, so an
  all-zero encoder is exactly the identity.
* ``ParameterStore``: a flat, ordered, namespaced view over module parameters
  used for backward, clipping, Adam and checkpoints.

Reverse-mode gradients come from torch autograd; ``backward`` only enforces
the overwrite contract on top of it.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, NumericError, UsageError, VersionError

logger = logging.getLogger(__name__)

DTYPE = torch.float64


def as_tensor(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def require_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NumericError(f"non-finite values in {where}")
    return tensor


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

def dense_forward(inputs: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Row-wise ``inputs @ weight.T + bias``; weight is ``(d_out, d_in)``."""
    if weight.dim() != 2 or bias.shape != (weight.shape[0],):
        raise ConfigurationError(
            f"dense weight {tuple(weight.shape)} and bias {tuple(bias.shape)} do not conform"
        )
    if inputs.shape[-1] != weight.shape[1]:
        raise ConfigurationError(
            f"dense input width {inputs.shape[-1]} != weight input width {weight.shape[1]}"
        )
    require_finite(weight, "dense weights")
    return require_finite(F.linear(inputs, weight, bias), "dense output")


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        if d_in <= 0 or d_out <= 0:
            raise ConfigurationError(f"dense extents must be positive, got {d_in}x{d_out}")
        self.weight = nn.Parameter(torch.zeros(d_out, d_in, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def reset_parameters(self, generator: torch.Generator, zero: bool = False) -> None:
        """Variance-preserving uniform init, bound sqrt(3 / fan_in); biases start at 0."""
        with torch.no_grad():
            self.bias.zero_()
            if zero:
                self.weight.zero_()
                return
            bound = math.sqrt(3.0 / self.weight.shape[1])
            self.weight.uniform_(-bound, bound, generator=generator)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return dense_forward(inputs, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    width: int = 32
    heads: int = 4
    ff_width: int = 64

    def __post_init__(self):
        for name in ("layers", "width", "heads", "ff_width"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"encoder {name} must be positive")
        if self.width % self.heads:
            raise ConfigurationError(
                f"encoder width {self.width} is not divisible by {self.heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.width // self.heads


class SelfAttention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.query = Dense(config.width, config.width)
        self.key = Dense(config.width, config.width)
        self.value = Dense(config.width, config.width)
        self.output = Dense(config.width, config.width)

    def _split(self, tensor: torch.Tensor) -> torch.Tensor:
        *lead, n_tok, _ = tensor.shape
        split = tensor.reshape(*lead, n_tok, self.config.heads, self.config.head_dim)
        return split.transpose(-3, -2)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = (self._split(proj(tokens)) for proj in (self.query, self.key, self.value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.config.head_dim)
        mixed = torch.softmax(scores, dim=-1) @ v
        merged = mixed.transpose(-3, -2).reshape(tokens.shape)
        return self.output(merged)


class EncoderBlock(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(config)
        self.ff_in = Dense(config.width, config.ff_width)
        self.ff_out = Dense(config.ff_width, config.width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = tokens + self.attention(tokens)
        return tokens + self.ff_out(F.silu(self.ff_in(tokens)))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))

    def dense_layers(self) -> Iterator[Dense]:
        return (m for m in self.modules() if isinstance(m, Dense))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for index, block in enumerate(self.blocks):
            try:
                tokens = block(tokens)
            except NumericError as exc:
                raise NumericError(f"encoder layer {index}: {exc}") from exc
            if not torch.isfinite(tokens).all():
                raise NumericError(f"non-finite activations after encoder layer {index}")
        return tokens


def encoder_forward(tokens: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    if tokens.shape[-1] != encoder.config.width:
        raise ConfigurationError(
            f"token width {tokens.shape[-1]} != encoder width {encoder.config.width}"
        )
    return encoder(tokens)


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Ordered ``namespace.name -> Parameter`` map over a module.

    Iteration order is the module's registration order, which is what the
    checkpoint writer relies on for stable files.
    """

    def __init__(self, module: Optional[nn.Module] = None, namespace: str = ""):
        self.module = module
        self.namespace = namespace
        self._entries: "OrderedDict[str, nn.Parameter]" = OrderedDict()
        if module is not None:
            for name, param in module.named_parameters():
                self.register(name, param)

    def _full_name(self, name: str) -> str:
        return f"{self.namespace}.{name}" if self.namespace else name

    def register(self, name: str, param: nn.Parameter) -> None:
        full = self._full_name(name)
        if full in self._entries:
            raise ConfigurationError(f"duplicate parameter name {full!r}")
        self._entries[full] = param

    @property
    def initialized(self) -> bool:
        return self.module is not None and bool(getattr(self.module, "initialized", True))

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[nn.Parameter]:
        return iter(self._entries.values())

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._entries[name]

    def names(self) -> List[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self) -> None:
        for param in self:
            if param.grad is None:
                param.grad = torch.zeros_like(param)
            else:
                param.grad.zero_()

    def grad_norm(self) -> float:
        grads = [p.grad for p in self if p.grad is not None]
        if not grads:
            raise UsageError("no gradients have been computed for this store")
        return math.sqrt(sum(float((g * g).sum()) for g in grads))

    def freeze(self) -> None:
        for param in self:
            param.requires_grad_(False)

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {name: param.detach().clone() for name, param in self.items()}

    def state_entries(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((name, param.detach()) for name, param in self.items())

    def load_entries(self, entries: Mapping[str, torch.Tensor]) -> None:
        missing = [name for name in self._entries if name not in entries]
        if missing:
            raise VersionError(f"checkpoint is missing entries: {', '.join(missing[:5])}")
        with torch.no_grad():
            for name, param in self.items():
                value = torch.as_tensor(entries[name], dtype=DTYPE)
                if tuple(value.shape) != tuple(param.shape):
                    raise VersionError(
                        f"entry {name!r} has shape {tuple(value.shape)}, model expects {tuple(param.shape)}"
                    )
                param.copy_(value)
        if self.module is not None and hasattr(self.module, "initialized"):
            self.module.initialized = True


def backward(loss: torch.Tensor, store: ParameterStore) -> None:
    """Overwrite every grad buffer in ``store`` with d(loss)/d(param)."""
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise UsageError("backward needs a scalar loss tensor")
    if loss.grad_fn is None:
        raise UsageError("loss was not computed through recorded operations")
    store.zero_grad()
    loss.backward()


def clip_global_norm(store: ParameterStore, max_norm: float = 1.0) -> float:
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be positive, got {max_norm}")
    norm = store.grad_norm()
    if not math.isfinite(norm):
        raise NumericError(f"global gradient norm is {norm}")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    with torch.no_grad():
        for param in store:
            if param.grad is not None:
                param.grad.mul_(scale)
    return scale


class AdamState:
    """Bias-corrected Adam over a store, plus its moments for checkpoints."""

    def __init__(
        self,
        store: ParameterStore,
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if not lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.store = store
        self.optimizer = torch.optim.Adam(list(store), lr=lr, betas=betas, eps=eps, foreach=False)
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def moments(self) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
        result = {}
        for name, param in self.store.items():
            state = self.optimizer.state.get(param)
            if state:
                result[name] = (state["exp_avg"], state["exp_avg_sq"])
        return result

    def state_entries(self) -> "OrderedDict[str, torch.Tensor]":
        entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, (first, second) in self.moments().items():
            entries[f"adam.m.{name}"] = first.detach()
            entries[f"adam.v.{name}"] = second.detach()
        return entries

    def load_entries(self, entries: Mapping[str, torch.Tensor], step_count: int) -> None:
        for name, param in self.store.items():
            if f"adam.m.{name}" not in entries:
                continue
            self.optimizer.state[param] = {
                "step": torch.tensor(float(step_count)),
                "exp_avg": torch.as_tensor(entries[f"adam.m.{name}"], dtype=DTYPE).clone(),
                "exp_avg_sq": torch.as_tensor(entries[f"adam.v.{name}"], dtype=DTYPE).clone(),
            }
        self.step_count = step_count


def adam_step(store: ParameterStore, state: AdamState) -> None:
    if any(param.grad is None for param in store):
        raise UsageError("adam_step called before gradients were populated")
    state.optimizer.step()
    state.step_count += 1
