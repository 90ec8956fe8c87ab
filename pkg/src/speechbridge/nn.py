"""Parameters, modules and the transformer building blocks shared by all components."""
from __future__ import annotations

import enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor


class ConfigurationError(ValueError):
    pass


class Role(str, enum.Enum):
    LAYER_NORM = "layer_norm"
    SELF_ATTN = "self_attn"
    ENCODER_ATTN = "encoder_attn"
    FFN = "ffn"
    EMBEDDING = "embedding"
    POSITIONAL = "positional"
    CONV_FEATURE = "conv_feature"
    ADAPTOR = "adaptor"
    OTHER = "other"


OWNERS = ("encoder", "adaptor", "decoder")


class Parameter(Tensor):
    """Trainable tensor tagged with a role and, once claimed, an owner and a name."""

    def __init__(self, data, role: Role | str):
        super().__init__(data, requires_grad=True)
        self._role = Role(role)
        self._owner: str | None = None
        self._name: str | None = None

    @property
    def role(self) -> Role:
        return self._role

    @property
    def owner(self) -> str | None:
        return self._owner

    @property
    def name(self) -> str | None:
        return self._name

    def claim(self, owner: str, name: str) -> None:
        if owner not in OWNERS:
            raise ConfigurationError(f"unknown owner {owner!r}")
        if self._owner is not None and (self._owner, self._name) != (owner, name):
            raise ConfigurationError(f"parameter {self._name} already owned by {self._owner}")
        self._owner, self._name = owner, name

    def __repr__(self) -> str:
        return f"Parameter({self._name}, shape={self.shape}, role={self._role.value}, owner={self._owner})"


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def claim(self, owner: str, prefix: str) -> None:
        """Assign owner and hierarchical names rooted at ``prefix``."""
        for name, p in self.named_parameters(prefix + "."):
            p.claim(owner, name)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name or n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = {p.name or n: p for n, p in self.named_parameters()}
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise T.ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
                p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _glorot(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    return rng.normal(shape, scale=np.sqrt(2.0 / (fan_in + fan_out)))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, role: Role | str, rng: Rng, bias: bool = True):
        self.weight = Parameter(_glorot(rng, in_dim, out_dim, (in_dim, out_dim)), role)
        self.bias = Parameter(np.zeros(out_dim), role) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, role: Role | str = Role.LAYER_NORM):
        self.weight = Parameter(np.ones(dim), role)
        self.bias = Parameter(np.zeros(dim), role)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, role: Role | str, rng: Rng, scale: float | None = None):
        self.weight = Parameter(rng.normal((count, dim), scale=scale or dim ** -0.5), role)

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor, head_count: int,
                         causal_mask: bool,
                         q_weight: Tensor, k_weight: Tensor, v_weight: Tensor, out_weight: Tensor,
                         q_bias: Tensor | None = None, k_bias: Tensor | None = None,
                         v_bias: Tensor | None = None, out_bias: Tensor | None = None,
                         key_padding_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``head_count`` heads.

    Inputs are ``(time, dim)`` or ``(batch, time, dim)``. With ``causal_mask``
    query ``t`` sees keys ``<= t``. ``key_padding_mask`` is ``(batch, time_k)``
    with True marking padding.
    """
    dim = queries.shape[-1]
    if head_count < 1 or dim % head_count:
        raise ConfigurationError(f"model dim {dim} is not divisible by head count {head_count}")
    squeeze = queries.ndim == 2
    if squeeze:
        queries, keys, values = (T.expand_dims(x, 0) for x in (queries, keys, values))
    q = _split_heads(T.linear(queries, q_weight, q_bias), head_count)
    k = _split_heads(T.linear(keys, k_weight, k_bias), head_count)
    v = _split_heads(T.linear(values, v_weight, v_bias), head_count)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dim // head_count))
    tq, tk = scores.shape[-2], scores.shape[-1]
    mask = None
    if causal_mask:
        mask = np.triu(np.ones((tq, tk), dtype=bool), k=1 + tk - tq)
    if key_padding_mask is not None:
        kp = np.asarray(key_padding_mask, dtype=bool)[:, None, None, :]
        mask = kp if mask is None else (mask | kp)
    if mask is not None:
        scores = T.masked_fill(scores, mask, -1e9)
    attn = T.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3)
    b = ctx.shape[0]
    out = T.linear(ctx.reshape(b, tq, dim), out_weight, out_bias)
    return out[0] if squeeze else out


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, role: Role | str, rng: Rng):
        if dim % heads:
            raise ConfigurationError(f"model dim {dim} is not divisible by head count {heads}")
        self.heads = heads
        self.q_proj = Linear(dim, dim, role, rng)
        self.k_proj = Linear(dim, dim, role, rng)
        self.v_proj = Linear(dim, dim, role, rng)
        self.out_proj = Linear(dim, dim, role, rng)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, causal: bool = False,
                key_padding_mask: np.ndarray | None = None) -> Tensor:
        return multi_head_attention(
            query, key, value, self.heads, causal,
            self.q_proj.weight, self.k_proj.weight, self.v_proj.weight, self.out_proj.weight,
            self.q_proj.bias, self.k_proj.bias, self.v_proj.bias, self.out_proj.bias,
            key_padding_mask=key_padding_mask)


class TransformerLayer(Module):
    """Pre-norm transformer block; ``cross_attention`` adds an encoder-attention sublayer."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: Rng, cross_attention: bool = False):
        self.self_attn_layer_norm = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, Role.SELF_ATTN, rng)
        if cross_attention:
            self.encoder_attn_layer_norm = LayerNorm(dim)
            self.encoder_attn = MultiHeadAttention(dim, heads, Role.ENCODER_ATTN, rng)
        self.ffn_layer_norm = LayerNorm(dim)
        self.fc1 = Linear(dim, ffn_dim, Role.FFN, rng)
        self.fc2 = Linear(ffn_dim, dim, Role.FFN, rng)

    def forward(self, x: Tensor, causal: bool = False, padding_mask: np.ndarray | None = None,
                memory: Tensor | None = None, memory_padding_mask: np.ndarray | None = None) -> Tensor:
        h = self.self_attn_layer_norm(x)
        x = x + self.self_attn(h, h, h, causal=causal, key_padding_mask=padding_mask)
        if memory is not None and hasattr(self, "encoder_attn"):
            h = self.encoder_attn_layer_norm(x)
            x = x + self.encoder_attn(h, memory, memory, key_padding_mask=memory_padding_mask)
        h = self.ffn_layer_norm(x)
        return x + self.fc2(T.gelu(self.fc1(h)))


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.linear(T.gelu(T.linear(x, w1, b1)), w2, b2)


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, epsilon: float = 0.3,
                      ignore_index: int | None = None) -> Tensor:
    """``(1 - eps) * NLL + eps * mean_c(-log p_c)``, averaged over non-ignored positions."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        if ignore_index is None or np.any((targets != ignore_index) & ((targets < 0) | (targets >= vocab))):
            raise T.ShapeError(f"targets outside vocabulary of size {vocab}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise T.UsageError("label_smoothed_ce: every target position is ignored")
    logp = T.log_softmax(logits, axis=-1)
    safe = np.where(keep, targets, 0)
    nll = -T.take_along_last(logp, safe)
    smooth = -logp.mean(axis=-1)
    per_pos = nll * (1.0 - epsilon) + smooth * epsilon
    return (per_pos * keep.astype(np.float64)).sum() * (1.0 / count)
