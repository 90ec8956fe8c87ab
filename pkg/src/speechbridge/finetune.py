"""Role-based parameter partitioning, freezing, and analytic finetuning budgets."""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .nn import ConfigurationError, Module, Parameter, Role

log = logging.getLogger(__name__)

ALL = "all"
SCRATCH = "scratch"


class EmptyTrainableSetWarning(UserWarning):
    pass


# First match wins. Adaptor ownership is checked before any name rule.
NAMING_RULES: list[tuple[re.Pattern, Role]] = [
    (re.compile(r"layer_norm"), Role.LAYER_NORM),
    (re.compile(r"\.self_attn\."), Role.SELF_ATTN),
    (re.compile(r"\.encoder_attn\."), Role.ENCODER_ATTN),
    (re.compile(r"\.fc[12]\."), Role.FFN),
    (re.compile(r"embed_tokens\.|output_projection\."), Role.EMBEDDING),
    (re.compile(r"embed_positions\.|pos_conv\."), Role.POSITIONAL),
    (re.compile(r"feature_extractor\.|post_extract_proj\."), Role.CONV_FEATURE),
    (re.compile(r"(^|\.)(mask_emb|quantizer\.|final_proj\.)"), Role.OTHER),
]


def role_from_name(name: str, owner: str | None) -> Role:
    if owner == "adaptor":
        return Role.ADAPTOR
    for pattern, role in NAMING_RULES:
        if pattern.search(name):
            return role
    raise ConfigurationError(f"parameter {name!r} does not follow the naming scheme; cannot assign a role")


def partition(params: Iterable[Parameter]) -> dict[Role, list[str]]:
    """Bucket parameter names by role, derived from names and checked against the stored tag."""
    buckets: dict[Role, list[str]] = {r: [] for r in Role}
    seen: set[str] = set()
    for p in params:
        if p.name is None:
            raise ConfigurationError(f"unnamed parameter {p!r}")
        if p.name in seen:
            raise ConfigurationError(f"duplicate parameter name {p.name}")
        seen.add(p.name)
        role = role_from_name(p.name, p.owner)
        if role is not p.role:
            raise ConfigurationError(f"{p.name}: name implies role {role.value} but parameter is tagged {p.role.value}")
        buckets[role].append(p.name)
    return buckets


@dataclass(frozen=True)
class FinetuneStrategy:
    name: str
    encoder_roles: frozenset | str
    decoder_roles: frozenset | str
    adaptor_trainable: bool = True
    reference_bleu: float | None = None
    reference_params_m: float | None = None

    def __post_init__(self):
        for side, roles, allowed in (("encoder", self.encoder_roles, (ALL,)),
                                     ("decoder", self.decoder_roles, (ALL, SCRATCH))):
            if isinstance(roles, str):
                if roles not in allowed:
                    raise ConfigurationError(f"{side} roles must be a role set or one of {allowed}, got {roles!r}")
            else:
                object.__setattr__(self, f"{side}_roles", frozenset(Role(r) for r in roles))

    @property
    def scratch_decoder(self) -> bool:
        return self.decoder_roles == SCRATCH

    def trains(self, owner: str, role: Role) -> bool:
        if owner == "adaptor":
            return self.adaptor_trainable
        roles = self.encoder_roles if owner == "encoder" else self.decoder_roles
        if roles in (ALL, SCRATCH):
            return True
        return role in roles

    def describe(self, owner: str) -> str:
        roles = self.encoder_roles if owner == "encoder" else self.decoder_roles
        if roles == ALL:
            return "all"
        if roles == SCRATCH:
            return "trained from scratch"
        if not roles:
            return "(none)"
        order = [Role.LAYER_NORM, Role.ENCODER_ATTN, Role.SELF_ATTN] + list(Role)
        return " + ".join(dict.fromkeys(r.value for r in order if r in roles))

    @classmethod
    def from_dict(cls, d: Mapping) -> "FinetuneStrategy":
        if "preset" in d:
            return STRATEGIES[d["preset"]]
        def roles(v):
            return v if isinstance(v, str) else frozenset(v)
        return cls(d.get("name", "custom"), roles(d["encoder_roles"]), roles(d["decoder_roles"]),
                   bool(d.get("adaptor_trainable", True)))

    def to_dict(self) -> dict:
        def roles(v):
            return v if isinstance(v, str) else sorted(r.value for r in v)
        return {"name": self.name, "encoder_roles": roles(self.encoder_roles),
                "decoder_roles": roles(self.decoder_roles), "adaptor_trainable": self.adaptor_trainable}


LN, SA, EA = Role.LAYER_NORM, Role.SELF_ATTN, Role.ENCODER_ATTN

# the seven what-to-finetune rows, with the reported BLEU and trainable-parameter budget
STRATEGIES: dict[str, FinetuneStrategy] = {s.name: s for s in [
    FinetuneStrategy("ln", {LN}, {LN}, True, 19.8, 19.0),
    FinetuneStrategy("ln+ea", {LN}, {LN, EA}, True, 20.3, 69.4),
    FinetuneStrategy("ln+ea+sa", {LN}, {LN, EA, SA}, True, 18.9, 119.8),
    FinetuneStrategy("best", {LN, SA}, {LN, EA, SA}, True, 21.5, 220.6),
    FinetuneStrategy("dec-all", {LN, SA}, ALL, True, 17.0, 578.4),
    FinetuneStrategy("all", ALL, ALL, True, 20.2, 793.0),
    FinetuneStrategy("scratch", {LN, SA}, SCRATCH, True, 2.2, 578.4),
]}

FROZEN = FinetuneStrategy("frozen", frozenset(), frozenset(), adaptor_trainable=False)


def select_trainable(model: Module, strategy: FinetuneStrategy) -> set[str]:
    """Mark parameters trainable per ``strategy`` (``requires_grad``) and return their names."""
    partition(model.parameters())
    chosen = set()
    for p in model.parameters():
        on = strategy.trains(p.owner, p.role)
        p.requires_grad = on
        if on:
            chosen.add(p.name)
    if not chosen:
        warnings.warn(f"strategy {strategy.name!r} leaves no trainable parameters; "
                      "optimizer steps are no-ops", EmptyTrainableSetWarning, stacklevel=2)
    return chosen


def apply_gradient_mask(model: Module, trainable: set[str]) -> None:
    """Drop any gradient recorded on a frozen parameter before the optimizer step."""
    for p in model.parameters():
        if p.name not in trainable:
            p.grad = None


# -- analytic accounting ---------------------------------------------------
def attention_params(d: int) -> int:
    return 4 * (d * d + d)


def ffn_params(d: int, ffn: int) -> int:
    return 2 * d * ffn + ffn + d


def layer_norm_params(d: int) -> int:
    return 2 * d


WAV2VEC_LARGE_CONV = ((512, 10, 5),) + ((512, 3, 2),) * 4 + ((512, 2, 2),) * 2


@dataclass(frozen=True)
class ReferenceArchSpec:
    """Full-size dimensions used only for counting; never instantiated."""
    encoder_layers: int = 24
    encoder_dim: int = 1024
    encoder_heads: int = 16
    encoder_ffn: int = 4096
    feature_conv: tuple = WAV2VEC_LARGE_CONV
    feature_conv_bias: bool = False
    feature_conv_norm: bool = True
    positional_conv_kernel: int = 128
    positional_conv_groups: int = 16
    decoder_layers: int = 12
    decoder_dim: int = 1024
    decoder_heads: int = 16
    decoder_ffn: int = 4096
    vocab: int = 250054
    decoder_max_positions: int = 1024
    decoder_position_offset: int = 2
    decoder_embedding_layer_norm: bool = True
    tie_output_to_embedding: bool = True
    adaptor_layers: int = 3
    adaptor_kernel: int = 3
    # gated (GLU) convs emit 2x channels before gating
    adaptor_channel_multiplier: int = 2
    always_trained_extras: int = 0


def reference_role_counts(arch: ReferenceArchSpec) -> dict[tuple[str, Role], int]:
    counts: dict[tuple[str, Role], int] = {}

    def add(owner, role, n):
        counts[(owner, role)] = counts.get((owner, role), 0) + int(n)

    d, f = arch.encoder_dim, arch.encoder_ffn
    in_ch = 1
    for ch, k, _ in arch.feature_conv:
        add("encoder", Role.CONV_FEATURE, ch * in_ch * k + (ch if arch.feature_conv_bias else 0))
        if arch.feature_conv_norm:
            add("encoder", Role.CONV_FEATURE, 2 * ch)
        in_ch = ch
    add("encoder", Role.LAYER_NORM, layer_norm_params(in_ch))
    add("encoder", Role.CONV_FEATURE, in_ch * d + d)
    # grouped positional conv with weight normalisation over the kernel axis
    k = arch.positional_conv_kernel
    add("encoder", Role.POSITIONAL, d * (d // arch.positional_conv_groups) * k + d + k)
    add("encoder", Role.OTHER, d)
    for _ in range(arch.encoder_layers):
        add("encoder", Role.SELF_ATTN, attention_params(d))
        add("encoder", Role.FFN, ffn_params(d, f))
        add("encoder", Role.LAYER_NORM, 2 * layer_norm_params(d))
    add("encoder", Role.LAYER_NORM, layer_norm_params(d))

    dd, df = arch.decoder_dim, arch.decoder_ffn
    m = arch.adaptor_channel_multiplier
    a_in = d
    for _ in range(arch.adaptor_layers):
        add("adaptor", Role.ADAPTOR, arch.adaptor_kernel * a_in * m * dd + m * dd)
        a_in = dd
    if arch.always_trained_extras:
        add("adaptor", Role.ADAPTOR, arch.always_trained_extras)

    add("decoder", Role.EMBEDDING, arch.vocab * dd)
    if not arch.tie_output_to_embedding:
        add("decoder", Role.EMBEDDING, arch.vocab * dd)
    add("decoder", Role.POSITIONAL, (arch.decoder_max_positions + arch.decoder_position_offset) * dd)
    if arch.decoder_embedding_layer_norm:
        add("decoder", Role.LAYER_NORM, layer_norm_params(dd))
    for _ in range(arch.decoder_layers):
        add("decoder", Role.SELF_ATTN, attention_params(dd))
        add("decoder", Role.ENCODER_ATTN, attention_params(dd))
        add("decoder", Role.FFN, ffn_params(dd, df))
        add("decoder", Role.LAYER_NORM, 3 * layer_norm_params(dd))
    add("decoder", Role.LAYER_NORM, layer_norm_params(dd))
    return counts


def model_role_counts(model: Module) -> dict[tuple[str, Role], int]:
    counts: dict[tuple[str, Role], int] = {}
    for p in model.parameters():
        key = (p.owner, p.role)
        counts[key] = counts.get(key, 0) + p.size
    return counts


def budget_from_counts(counts: Mapping[tuple[str, Role], int], strategy: FinetuneStrategy) -> tuple[int, float]:
    total = sum(counts.values())
    trainable = sum(n for (owner, role), n in counts.items() if strategy.trains(owner, role))
    return trainable, trainable / total


def count_budget(arch: ReferenceArchSpec, strategy: FinetuneStrategy) -> tuple[int, float]:
    """Trainable parameter count and its fraction of the full pipeline."""
    return budget_from_counts(reference_role_counts(arch), strategy)


@dataclass
class BudgetRow:
    strategy: FinetuneStrategy
    trainable: int
    fraction: float

    @property
    def millions(self) -> float:
        return self.trainable / 1e6


@dataclass
class BudgetTable:
    rows: list[BudgetRow] = field(default_factory=list)

    def render(self) -> str:
        header = ["encoder_finetuning", "decoder_finetuning", "ref_bleu", "ft_params", "ft_percent", "ref_params"]
        lines = ["\t".join(header)]
        for r in self.rows:
            s = r.strategy
            ref_bleu = "-" if s.reference_bleu is None else f"{s.reference_bleu:.1f}"
            ref_params = "-" if s.reference_params_m is None else f"{s.reference_params_m:.1f}M"
            lines.append("\t".join([s.describe("encoder"), s.describe("decoder"), ref_bleu,
                                    f"{r.millions:.1f}M", f"{100 * r.fraction:.1f}%", ref_params]))
        return "\n".join(lines)


def emit_budget_table(arch: ReferenceArchSpec | None = None,
                      strategies: Iterable[FinetuneStrategy] | None = None) -> BudgetTable:
    arch = arch or ReferenceArchSpec()
    strategies = list(STRATEGIES.values()) if strategies is None else list(strategies)
    counts = reference_role_counts(arch)
    return BudgetTable([BudgetRow(s, *budget_from_counts(counts, s)) for s in strategies])
