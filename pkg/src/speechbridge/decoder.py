"""Toy multilingual transformer decoder with denoising pretraining and beam search."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nn import ConfigurationError, Embedding, LayerNorm, Linear, Module, Role, TransformerLayer, label_smoothed_ce
from .optim import Adam, AdamConfig
from .rng import Rng
from .speech import padding_mask
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, MASK = "<pad>", "<s>", "</s>", "<mask>"
SPECIALS = (PAD, BOS, EOS, MASK)


def lang_tag(code: str) -> str:
    return f"<lang:{code}>"


class Vocabulary:
    """Reserved entries first, then one tag per language, then content tokens."""

    def __init__(self, languages: Sequence[str], tokens: Sequence[str]):
        self.languages = list(languages)
        self.tokens = list(SPECIALS) + [lang_tag(c) for c in self.languages] + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigurationError("duplicate vocabulary entries")

    pad_id, bos_id, eos_id, mask_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def content_offset(self) -> int:
        return len(SPECIALS) + len(self.languages)

    @property
    def content_tokens(self) -> list[str]:
        return self.tokens[self.content_offset:]

    def lang_id(self, code: str) -> int:
        try:
            return self.index[lang_tag(code)]
        except KeyError:
            raise ConfigurationError(f"language {code!r} has no tag in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[t] for t in text.split()]
        except KeyError as e:
            raise ValueError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids, drop_special: bool = True) -> str:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if drop_special and (tok in SPECIALS or tok.startswith("<lang:")):
                continue
            out.append(tok)
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
        if tuple(lines[:4]) != SPECIALS:
            raise ConfigurationError(f"{path}: vocabulary must start with {', '.join(SPECIALS)}")
        langs = []
        i = 4
        while i < len(lines) and lines[i].startswith("<lang:"):
            langs.append(lines[i][len("<lang:"):-1])
            i += 1
        return cls(langs, lines[i:])


@dataclass
class DecoderConfig:
    layer_count: int = 3
    model_dim: int = 64
    head_count: int = 4
    ffn_dim: int = 256
    vocab_size: int = 40
    languages: list[str] = field(default_factory=lambda: ["de"])
    max_positions: int = 256
    tie_output_to_embedding: bool = True

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by head_count {self.head_count}")
        if self.vocab_size < len(SPECIALS) + len(self.languages):
            raise ConfigurationError("vocabulary too small for reserved entries and language tags")

    @property
    def lang_ids(self) -> dict[str, int]:
        return {c: len(SPECIALS) + i for i, c in enumerate(self.languages)}


class TextDecoder(Module):
    def __init__(self, config: DecoderConfig, rng: Rng):
        self.config = config
        d = config.model_dim
        self.embed_tokens = Embedding(config.vocab_size, d, Role.EMBEDDING, rng)
        self.embed_positions = Embedding(config.max_positions, d, Role.POSITIONAL, rng, scale=0.02)
        self.layers = [TransformerLayer(d, config.head_count, config.ffn_dim, rng, cross_attention=True)
                       for _ in range(config.layer_count)]
        if config.layer_count:
            self.layer_norm = LayerNorm(d)
        if not config.tie_output_to_embedding:
            self.output_projection = Linear(d, config.vocab_size, Role.EMBEDDING, rng, bias=False)
        self._tag_ids = np.array(sorted(config.lang_ids.values()), dtype=np.int64)
        self.claim("decoder", "decoder")

    def forward(self, prefix, memory: Tensor | None = None,
                memory_padding_mask: np.ndarray | None = None) -> Tensor:
        return decode_forward(self, prefix, memory, memory_padding_mask)


def decode_forward(decoder: TextDecoder, prefix, memory: Tensor | None = None,
                   memory_padding_mask: np.ndarray | None = None) -> Tensor:
    """Per-position vocabulary logits for language-tagged prefixes.

    ``prefix`` is ``(length,)`` or ``(batch, length)`` token ids whose first
    entry is a language tag. Cross-attention is skipped when ``memory`` is None.
    """
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        if memory is not None and memory.ndim == 2:
            memory = T.expand_dims(memory, 0)
    b, length = ids.shape
    cfg = decoder.config
    if length > cfg.max_positions:
        raise ValueError(f"prefix length {length} exceeds max_positions={cfg.max_positions}")
    bad = ~np.isin(ids[:, 0], decoder._tag_ids)
    if bad.any():
        raise ConfigurationError(f"prefix must start with a language tag; got token id {int(ids[bad][0, 0])}")
    if memory is not None and memory.shape[0] != b:
        raise T.ShapeError(f"memory batch {memory.shape[0]} != prefix batch {b}")
    x = decoder.embed_tokens(ids) + decoder.embed_positions(np.arange(length))
    for layer in decoder.layers:
        x = layer(x, causal=True, memory=memory, memory_padding_mask=memory_padding_mask)
    if decoder.layers:
        x = decoder.layer_norm(x)
    if cfg.tie_output_to_embedding:
        logits = x @ decoder.embed_tokens.weight.transpose()
    else:
        logits = decoder.output_projection(x)
    return logits[0] if single else logits


# -- noising ------------------------------------------------------------------
@dataclass
class NoiseConfig:
    mask_ratio: float = 0.35
    poisson_lambda: float = 3.5
    permute_sentences: bool = False
    mask_id: int = 3
    separator_id: int = 2


def span_cover(n: int, mask_ratio: float, poisson_lambda: float, rng: Rng) -> np.ndarray:
    """Boolean cover built from Poisson-length spans until ``mask_ratio`` of ``n`` is reached."""
    cover = np.zeros(n, dtype=bool)
    target = mask_ratio * n
    covered = 0
    while covered < target and covered < n:
        span = max(1, int(rng.poisson(poisson_lambda)))
        start = int(rng.integers(0, n))
        cover[start:start + span] = True
        covered = int(cover.sum())
    return cover


def apply_noise(x, noise: NoiseConfig, rng: Rng) -> np.ndarray:
    """Noising function: optional sentence permutation, then span masking.

    Each maximal masked run collapses into a single mask token.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.size == 0:
        raise ValueError("apply_noise: empty sequence")
    if noise.permute_sentences:
        ends = np.flatnonzero(x == noise.separator_id) + 1
        bounds = [0] + [int(e) for e in ends if e < x.size] + [x.size]
        sents = [x[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        x = np.concatenate([sents[i] for i in rng.permutation(len(sents))])
    if noise.mask_ratio <= 0:
        return x.copy()
    cover = span_cover(x.size, noise.mask_ratio, noise.poisson_lambda, rng)
    out = []
    prev = False
    for tok, c in zip(x, cover):
        if c:
            if not prev:
                out.append(noise.mask_id)
        else:
            out.append(int(tok))
        prev = bool(c)
    return np.array(out, dtype=np.int64)


class TextEncoder(Module):
    """Two-layer encoder over noised text, used only for denoising pretraining."""

    def __init__(self, decoder: TextDecoder, rng: Rng, layer_count: int = 2):
        cfg = decoder.config
        self._decoder = decoder  # shares embed_tokens; not a registered child
        self.embed_positions = Embedding(cfg.max_positions, cfg.model_dim, Role.POSITIONAL, rng, scale=0.02)
        self.layers = [TransformerLayer(cfg.model_dim, cfg.head_count, cfg.ffn_dim, rng)
                       for _ in range(layer_count)]
        self.layer_norm = LayerNorm(cfg.model_dim)
        self.claim("decoder", "text_encoder")

    def named_parameters(self, prefix: str = ""):
        for name, p in super().named_parameters(prefix):
            if not name.startswith(f"{prefix}_decoder"):
                yield name, p

    def forward(self, ids: np.ndarray, pad: np.ndarray | None = None) -> Tensor:
        x = self._decoder.embed_tokens(ids) + self.embed_positions(np.arange(ids.shape[1]))
        for layer in self.layers:
            x = layer(x, padding_mask=pad)
        return self.layer_norm(x)


def _pad_batch(seqs: Sequence[np.ndarray], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def teacher_forcing_batch(targets: Sequence[np.ndarray], lang_ids: Sequence[int],
                          pad_id: int = 0, eos_id: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs ``[tag] + y`` and outputs ``y + [</s>]``, right padded."""
    inputs = [np.concatenate([[lang], np.asarray(y, dtype=np.int64)]) for y, lang in zip(targets, lang_ids)]
    outputs = [np.concatenate([np.asarray(y, dtype=np.int64), [eos_id]]) for y in targets]
    return _pad_batch(inputs, pad_id), _pad_batch(outputs, pad_id)


def denoising_loss(decoder: TextDecoder, text_encoder: TextEncoder, batch: Sequence[np.ndarray],
                   lang_ids: Sequence[int], noise: NoiseConfig, rng: Rng, epsilon: float = 0.0,
                   pad_id: int = 0, eos_id: int = 2) -> Tensor:
    """Mean negative log-likelihood of ``x`` given ``g(x)``, teacher forced."""
    if len(batch) == 0:
        raise ValueError("denoising_loss: empty batch")
    noised = [np.concatenate([apply_noise(x, noise, rng), [eos_id]]) for x in batch]
    src = _pad_batch(noised, pad_id)
    src_pad = src == pad_id
    memory = text_encoder(src, src_pad if src_pad.any() else None)
    dec_in, dec_out = teacher_forcing_batch(batch, lang_ids, pad_id, eos_id)
    logits = decode_forward(decoder, dec_in, memory, src_pad if src_pad.any() else None)
    return label_smoothed_ce(logits, dec_out, epsilon, ignore_index=pad_id)


@dataclass
class DenoisingConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    noise: NoiseConfig = field(default_factory=NoiseConfig)


def pretrain_denoising(decoder: TextDecoder, corpus: Sequence[tuple[np.ndarray, int]],
                       cfg: DenoisingConfig, rng: Rng, text_encoder: TextEncoder | None = None
                       ) -> list[float]:
    """Denoising-autoencoder pretraining of ``decoder`` in place; returns per-step losses."""
    text_encoder = text_encoder or TextEncoder(decoder, rng.child("text_encoder"))
    params = decoder.parameters() + text_encoder.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, AdamConfig(lr=cfg.lr, warmup_steps=max(1, cfg.steps // 10)))
    order, noise_rng = rng.child("order"), rng.child("noise")
    decoder.train()
    history = []
    for step in range(cfg.steps):
        pick = order.integers(0, len(corpus), cfg.batch_size)
        loss = denoising_loss(decoder, text_encoder, [corpus[i][0] for i in pick],
                              [corpus[i][1] for i in pick], cfg.noise, noise_rng)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        history.append(loss.item())
        if step % 50 == 0:
            log.debug("denoising step %d loss %.4f", step, history[-1])
    return history


# -- search -------------------------------------------------------------------
@dataclass
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = False
    truncated: bool = False

    def normalized(self, length_penalty: float = 1.0) -> float:
        return self.score / max(1, len(self.tokens)) ** length_penalty


StepFn = Callable[[list[list[int]]], np.ndarray]


def beam_search_steps(step_logprobs: StepFn, prefix: Sequence[int], eos_id: int, beam: int = 5,
                      max_len: int = 50, length_penalty: float = 1.0,
                      banned: Sequence[int] = ()) -> list[Hypothesis]:
    """Beam search over an abstract next-token scorer.

    ``step_logprobs(prefixes)`` returns ``(len(prefixes), vocab)`` log
    probabilities for the token following each full prefix. ``Hypothesis.tokens``
    holds generated tokens only (terminal token included). Hypotheses alive at
    ``max_len`` are force-finished and flagged ``truncated``. The result is
    ranked by ``score / len ** length_penalty``.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    prefix = list(prefix)
    active = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = np.array(step_logprobs([prefix + h.tokens for h in active]), dtype=np.float64)
        if banned:
            lp[:, list(banned)] = -np.inf
        total = np.array([h.score for h in active])[:, None] + lp
        flat = total.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:2 * beam]
        vocab = lp.shape[1]
        nxt = []
        for idx in order:
            if not np.isfinite(flat[idx]):
                break
            src, tok = divmod(int(idx), vocab)
            hyp = Hypothesis(active[src].tokens + [tok], float(flat[idx]))
            if tok == eos_id:
                hyp.finished = True
                finished.append(hyp)
            else:
                nxt.append(hyp)
            if len(nxt) == beam:
                break
        active = nxt
        if len(finished) >= beam or not active:
            break
    else:
        for h in active:
            h.finished = h.truncated = True
        finished.extend(active)
    if not finished:
        for h in active:
            h.finished = h.truncated = True
        finished = active
    finished.sort(key=lambda h: -h.normalized(length_penalty))
    return finished[:beam]


def greedy_steps(step_logprobs: StepFn, prefix: Sequence[int], eos_id: int, max_len: int = 50,
                 banned: Sequence[int] = ()) -> Hypothesis:
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        lp = np.array(step_logprobs([list(prefix) + tokens])[0], dtype=np.float64)
        if banned:
            lp[list(banned)] = -np.inf
        tok = int(np.argmax(lp))
        tokens.append(tok)
        score += float(lp[tok])
        if tok == eos_id:
            return Hypothesis(tokens, score, finished=True)
    return Hypothesis(tokens, score, finished=True, truncated=True)


def _decoder_step_fn(decoder: TextDecoder, memory: Tensor | None) -> StepFn:
    def step(prefixes: list[list[int]]) -> np.ndarray:
        ids = np.array(prefixes, dtype=np.int64)
        mem = None
        if memory is not None:
            m = memory.data if memory.ndim == 3 else memory.data[None]
            mem = Tensor(np.broadcast_to(m, (len(prefixes),) + m.shape[1:]))
        with T.no_grad():
            logits = decode_forward(decoder, ids, mem)
            return T.log_softmax(logits[:, -1], axis=-1).data
    return step


def _banned_ids(decoder: TextDecoder) -> list[int]:
    return [0, 1, 3] + [int(i) for i in decoder._tag_ids]


def beam_search(decoder: TextDecoder, memory: Tensor | None, lang_id: int, beam: int = 5,
                max_len: int = 50, length_penalty: float = 1.0) -> list[Hypothesis]:
    """Decode one utterance from ``memory`` (``(frames, dim)``) in language ``lang_id``."""
    if lang_id not in decoder._tag_ids:
        raise ConfigurationError(f"token id {lang_id} is not a language tag")
    return beam_search_steps(_decoder_step_fn(decoder, memory), [lang_id], eos_id=2, beam=beam,
                             max_len=max_len, length_penalty=length_penalty, banned=_banned_ids(decoder))


def greedy_decode(decoder: TextDecoder, memory: Tensor | None, lang_id: int, max_len: int = 50) -> Hypothesis:
    return greedy_steps(_decoder_step_fn(decoder, memory), [lang_id], eos_id=2, max_len=max_len,
                        banned=_banned_ids(decoder))


def uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
