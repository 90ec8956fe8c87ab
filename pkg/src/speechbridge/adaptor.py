"""Strided 1-d convolution stack bridging speech-encoder output to the text decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConfigurationError, LayerNorm, Linear, Module, Parameter, Role
from .rng import Rng
from .tensor import Tensor


@dataclass
class AdaptorConfig:
    layer_count: int = 3
    stride: int = 2
    kernel: int = 3
    layer_drop: float = 0.0
    use_layer_norm: bool = False
    in_dim: int = 64
    out_dim: int = 64
    activation: str = "relu"

    def __post_init__(self):
        if self.layer_count < 1:
            raise ConfigurationError("adaptor needs at least one layer")
        if self.stride < 1:
            raise ConfigurationError("adaptor stride must be >= 1")
        if self.kernel < self.stride:
            raise ConfigurationError(f"adaptor kernel {self.kernel} smaller than stride {self.stride}")
        if not 0.0 <= self.layer_drop < 1.0:
            raise ConfigurationError("layer_drop must lie in [0, 1)")
        if self.activation not in ("relu", "gelu"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def layer_length(self, t: int) -> int:
        return T.conv_output_length(t, self.kernel, self.stride, self.padding)


def output_length(t: int, config: AdaptorConfig, dropped=None) -> int:
    """Length after the stack, skipping layers flagged in ``dropped``."""
    dropped = [False] * config.layer_count if dropped is None else list(dropped)
    if len(dropped) != config.layer_count:
        raise ValueError(f"dropped has {len(dropped)} flags for {config.layer_count} layers")
    for d in dropped:
        if not d:
            t = config.layer_length(t)
    return t


class AdaptorLayer(Module):
    def __init__(self, dim: int, config: AdaptorConfig, rng: Rng):
        k = config.kernel
        self.weight = Parameter(rng.normal((dim, dim, k), scale=np.sqrt(2.0 / (dim * k))), Role.ADAPTOR)
        self.bias = Parameter(np.zeros(dim), Role.ADAPTOR)
        if config.use_layer_norm:
            self.layer_norm = LayerNorm(dim, role=Role.ADAPTOR)
        self.config = config

    def forward(self, x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        c = self.config
        # x: (batch, time, dim) -> conv over time
        y = T.conv1d(x.transpose(0, 2, 1), self.weight, self.bias, stride=c.stride, padding=c.padding)
        y = y.transpose(0, 2, 1)
        y = T.relu(y) if c.activation == "relu" else T.gelu(y)
        if c.use_layer_norm:
            y = self.layer_norm(y)
        new_lengths = np.array([c.layer_length(int(n)) for n in lengths], dtype=np.int64)
        return _zero_tail(y, new_lengths), new_lengths


def _zero_tail(x: Tensor, lengths: np.ndarray) -> Tensor:
    # keeps padded frames at zero so batched and single-utterance results agree
    keep = np.arange(x.shape[1])[None, :] < lengths[:, None]
    if keep.all():
        return x
    return x * keep[..., None].astype(np.float64)


class Adaptor(Module):
    def __init__(self, config: AdaptorConfig, rng: Rng):
        self.config = config
        if config.in_dim != config.out_dim:
            self.in_proj = Linear(config.in_dim, config.out_dim, Role.ADAPTOR, rng)
        self.layers = [AdaptorLayer(config.out_dim, config, rng) for _ in range(config.layer_count)]
        self.claim("adaptor", "adaptor")

    def sample_drops(self, rng: Rng | None) -> list[bool]:
        if not self.training or self.config.layer_drop == 0.0 or rng is None:
            return [False] * self.config.layer_count
        return [bool(u < self.config.layer_drop) for u in rng.random(self.config.layer_count)]

    def forward(self, x: Tensor, lengths=None, rng: Rng | None = None
                ) -> tuple[Tensor, np.ndarray, list[bool]]:
        return adapt(x, self, lengths, rng)


def adapt(encoder_out: Tensor, adaptor: Adaptor, lengths=None, rng: Rng | None = None
          ) -> tuple[Tensor, np.ndarray, list[bool]]:
    """Project and downsample ``(batch, time, dim)`` or ``(time, dim)`` encoder output.

    In training mode each layer is skipped independently with probability
    ``layer_drop``; a skipped layer is a full identity, so it changes neither
    values nor length. Returns the output, its per-utterance lengths and the
    drop flags used.
    """
    single = encoder_out.ndim == 2
    x = T.expand_dims(encoder_out, 0) if single else encoder_out
    lengths = np.full(x.shape[0], x.shape[1], dtype=np.int64) if lengths is None \
        else np.asarray(lengths, dtype=np.int64)
    if x.shape[1] < 1 or lengths.min() < 1:
        raise ValueError("adaptor input must have at least 1 frame")
    x = _zero_tail(x, lengths)
    if hasattr(adaptor, "in_proj"):
        x = _zero_tail(adaptor.in_proj(x), lengths)
    dropped = adaptor.sample_drops(rng)
    for layer, skip in zip(adaptor.layers, dropped):
        if not skip:
            x, lengths = layer(x, lengths)
    if lengths.min() < 1:
        raise ValueError("adaptor output is empty; inputs need at least 1 frame")
    return (x[0] if single else x), lengths, dropped


@dataclass(frozen=True)
class AdaptorGridRow:
    stride: int
    layers: int
    layer_drop: float
    layer_norm: bool
    reference_bleu: float

    def config(self, in_dim: int = 64, out_dim: int = 64, kernel: int = 3) -> AdaptorConfig:
        return AdaptorConfig(layer_count=self.layers, stride=self.stride, kernel=max(kernel, self.stride),
                             layer_drop=self.layer_drop, use_layer_norm=self.layer_norm,
                             in_dim=in_dim, out_dim=out_dim)

    @property
    def label(self) -> str:
        drop = "-" if self.layer_drop == 0 else f"{self.layer_drop:g}"
        return f"s={self.stride} n={self.layers} drop={drop} ln={'YES' if self.layer_norm else 'NO'}"


# en-de adaptor ablation; BLEU values are reference annotations only
_ADAPTOR_ABLATION = [
    (2, 3, 0.0, False, 19.76),
    (2, 3, 0.3, False, 23.23),
    (2, 3, 0.2, False, 22.38),
    (2, 3, 0.2, True, 19.4),
    (2, 4, 0.0, False, 21.73),
    (2, 4, 0.3, False, 0.14),
    (3, 3, 0.3, False, 21.27),
    (3, 3, 0.0, False, 22.23),
]


def adaptor_ablation_grid() -> list[AdaptorGridRow]:
    return [AdaptorGridRow(*row) for row in _ADAPTOR_ABLATION]
