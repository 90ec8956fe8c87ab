"""Toy wav2vec-style speech encoder, its contrastive objective and the log-mel front-end."""
from __future__ import annotations

import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import ConfigurationError, Embedding, LayerNorm, Linear, Module, Parameter, Role, TransformerLayer
from .optim import Adam, AdamConfig
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000


@dataclass
class FeatureEncoderConfig:
    # (out_channels, kernel, stride) per conv layer
    layers: list[tuple[int, int, int]] = field(default_factory=lambda: [(64, 8, 4), (64, 4, 2), (64, 4, 2)])

    def __post_init__(self):
        self.layers = [tuple(int(v) for v in layer) for layer in self.layers]
        if not self.layers:
            raise ConfigurationError("feature encoder needs at least one conv layer")
        for ch, k, s in self.layers:
            if ch < 1 or s < 1 or k < s:
                raise ConfigurationError(f"invalid conv layer (channels={ch}, kernel={k}, stride={s}); "
                                         "need stride >= 1 and kernel >= stride")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, _, s in self.layers]))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for _, k, s in self.layers:
            rf += (k - 1) * jump
            jump *= s
        return rf

    def output_length(self, samples: int) -> int:
        n = samples
        for _, k, s in self.layers:
            n = T.conv_output_length(n, k, s, 0)
        return n


@dataclass
class ContextEncoderConfig:
    layer_count: int = 2
    model_dim: int = 64
    head_count: int = 4
    ffn_dim: int = 256
    max_positions: int = 1024

    def __post_init__(self):
        if self.model_dim % self.head_count:
            raise ConfigurationError(f"model_dim {self.model_dim} not divisible by head_count {self.head_count}")


@dataclass
class MaskSpec:
    mask_probability: float = 0.065
    span_length: int = 4

    def __post_init__(self):
        if not 0.0 <= self.mask_probability <= 1.0:
            raise ConfigurationError("mask_probability must lie in [0, 1]")
        if self.span_length < 1:
            raise ConfigurationError("span_length must be >= 1")


@dataclass
class QuantizerConfig:
    group_count: int = 2
    entries_per_group: int = 16
    temperature: float = 1.0


class ConvLayer(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, rng: Rng):
        scale = np.sqrt(2.0 / (in_ch * kernel))
        self.weight = Parameter(rng.normal((out_ch, in_ch, kernel), scale=scale), Role.CONV_FEATURE)
        self.bias = Parameter(np.zeros(out_ch), Role.CONV_FEATURE)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(T.conv1d(x, self.weight, self.bias, stride=self.stride))


class ConvFeatureExtractor(Module):
    def __init__(self, config: FeatureEncoderConfig, rng: Rng):
        self.conv_layers = []
        in_ch = 1
        for ch, k, s in config.layers:
            self.conv_layers.append(ConvLayer(in_ch, ch, k, s, rng))
            in_ch = ch

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.conv_layers:
            x = layer(x)
        return x


def padding_mask(lengths, width: int) -> np.ndarray:
    """``(batch, width)`` mask, True beyond each sequence length."""
    return np.arange(width)[None, :] >= np.asarray(lengths)[:, None]


class SpeechEncoder(Module):
    """Waveform -> latent frames Z -> context frames C."""

    def __init__(self, feature: FeatureEncoderConfig, context: ContextEncoderConfig, rng: Rng):
        self.feature_config = feature
        self.context_config = context
        d = context.model_dim
        last = feature.layers[-1][0]
        self.feature_extractor = ConvFeatureExtractor(feature, rng)
        self.feature_layer_norm = LayerNorm(last)
        self.post_extract_proj = Linear(last, d, Role.CONV_FEATURE, rng)
        self.mask_emb = Parameter(rng.uniform(size=d), Role.OTHER)
        self.embed_positions = Embedding(context.max_positions, d, Role.POSITIONAL, rng, scale=0.02)
        self.layers = [TransformerLayer(d, context.head_count, context.ffn_dim, rng)
                       for _ in range(context.layer_count)]
        # the closing norm belongs to the stack; a zero-layer encoder has none
        if context.layer_count:
            self.layer_norm = LayerNorm(d)
        self.claim("encoder", "encoder")

    @property
    def dim(self) -> int:
        return self.context_config.model_dim

    def latent_lengths(self, sample_lengths) -> np.ndarray:
        return np.array([self.feature_config.output_length(int(n)) for n in sample_lengths], dtype=np.int64)

    def encode_waveform(self, samples, lengths=None) -> tuple[Tensor, np.ndarray]:
        """Map ``(batch, samples)`` or ``(samples,)`` audio to latents Z.

        Returns Z as ``(batch, frames, dim)`` (or ``(frames, dim)`` for 1-d
        input) and the per-utterance latent lengths.
        """
        x = np.asarray(samples, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.shape[1] == 0:
            raise ValueError("encode_waveform: empty waveform")
        lengths = np.full(x.shape[0], x.shape[1]) if lengths is None else np.asarray(lengths)
        rf = self.feature_config.receptive_field
        if lengths.min() < rf:
            raise ValueError(f"waveform of {int(lengths.min())} samples is shorter than the "
                             f"feature encoder receptive field ({rf} samples)")
        feats = self.feature_extractor(Tensor(x[:, None, :]))
        z = self.post_extract_proj(self.feature_layer_norm(feats.transpose(0, 2, 1)))
        lat = self.latent_lengths(lengths)
        if single:
            return z[0], lat
        return z, lat

    def contextualize(self, z: Tensor, mask: np.ndarray | None = None,
                      pad: np.ndarray | None = None) -> Tensor:
        """Replace masked frames by the mask embedding, add positions, run the stack."""
        single = z.ndim == 2
        if single:
            z = T.expand_dims(z, 0)
            mask = None if mask is None else np.asarray(mask)[None]
        b, t, d = z.shape
        if t > self.context_config.max_positions:
            raise ValueError(f"{t} frames exceed max_positions={self.context_config.max_positions}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (b, t):
                raise ValueError(f"mask shape {mask.shape} does not match latent shape {(b, t)}")
            if mask.any():
                m = mask[..., None].astype(np.float64)
                z = z * (1.0 - m) + self.mask_emb * m
        x = z + self.embed_positions(np.arange(t))
        for layer in self.layers:
            x = layer(x, padding_mask=pad)
        if self.layers:
            x = self.layer_norm(x)
        return x[0] if single else x

    def forward(self, samples, lengths=None, mask=None) -> tuple[Tensor, np.ndarray]:
        z, lat = self.encode_waveform(samples, lengths)
        pad = None if z.ndim == 2 else padding_mask(lat, z.shape[1])
        if pad is not None and not pad.any():
            pad = None
        return self.contextualize(z, mask, pad), lat


def encode_waveform(samples, encoder: SpeechEncoder):
    return encoder.encode_waveform(samples)


# -- masking ------------------------------------------------------------------
def sample_span_mask(length: int, spec: MaskSpec, rng: Rng) -> np.ndarray:
    """Independent Bernoulli span starts; each start masks ``span_length`` frames.

    Overlapping spans merge and spans are clipped at the sequence end.
    """
    starts = rng.random(length) < spec.mask_probability
    mask = np.zeros(length, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s:s + spec.span_length] = True
    return mask


def expected_mask_fraction(length: int, spec: MaskSpec) -> float:
    t = np.arange(length)
    covering = np.minimum(spec.span_length, t + 1)
    return float(np.mean(1.0 - (1.0 - spec.mask_probability) ** covering))


# -- quantizer ------------------------------------------------------------------
class Quantizer(Module):
    """Product quantizer: nearest codebook entry per group, straight-through in training."""

    def __init__(self, dim: int, config: QuantizerConfig, rng: Rng):
        if dim % config.group_count:
            raise ConfigurationError(f"latent dim {dim} not divisible by {config.group_count} groups")
        self.config = config
        g, v = config.group_count, config.entries_per_group
        self.codebook = Parameter(rng.normal((g, v, dim // g)), Role.OTHER)

    def forward(self, z: Tensor) -> tuple[Tensor, float]:
        return quantize(z, self)


def quantize(z: Tensor, quantizer: Quantizer) -> tuple[Tensor, float]:
    """Map each frame to concatenated codebook entries.

    Selection scores are negative squared distances to the entries of each
    group. Training mode uses a straight-through estimator (hard one-hot
    forward, softmax gradient); evaluation mode is a hard argmax, which makes
    re-quantizing a quantized sequence pick the same entries. The returned
    diversity statistic is the inverse perplexity of the batch-averaged
    selection distribution averaged over groups: ``1/entries`` under uniform
    usage, 1 when one entry is always chosen.
    """
    cfg = quantizer.config
    g, v = cfg.group_count, cfg.entries_per_group
    lead = z.shape[:-1]
    dg = z.shape[-1] // g
    if z.shape[-1] != g * quantizer.codebook.shape[-1]:
        raise T.ShapeError(f"latent dim {z.shape[-1]} does not match codebook {quantizer.codebook.shape}")
    diff = T.expand_dims(z.reshape(*lead, g, dg), -2) - quantizer.codebook
    logits = -(diff * diff).sum(axis=-1)
    soft = T.softmax(logits * (1.0 / cfg.temperature), axis=-1)
    hard = np.zeros(logits.shape)
    np.put_along_axis(hard, logits.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    if quantizer.training:
        sel = soft + Tensor(hard) - T.stop_gradient(soft)
    else:
        sel = Tensor(hard)
    # (..., g, v) x (g, v, dg) -> (..., g, dg)
    q = (T.expand_dims(sel, -1) * quantizer.codebook).sum(axis=-2).reshape(*lead, g * dg)
    avg = soft.data.reshape(-1, g, v).mean(axis=0)
    diversity = inverse_perplexity(avg)
    return q, diversity


def inverse_perplexity(probs: np.ndarray) -> float:
    """Mean over groups of ``exp(-H(p))`` for ``(groups, entries)`` distributions."""
    ent = -(probs * np.log(np.maximum(probs, 1e-30))).sum(axis=-1)
    return float(np.mean(np.exp(-ent)))


# -- contrastive objective -----------------------------------------------------
def _cosine(a: Tensor, b: Tensor) -> Tensor:
    na = T.sqrt((a * a).sum(axis=-1) + 1e-12)
    nb = T.sqrt((b * b).sum(axis=-1) + 1e-12)
    return (a * b).sum(axis=-1) / (na * nb)


def contrastive_loss(c: Tensor, q: Tensor, mask: np.ndarray, distractors: int, rng: Rng,
                     temperature: float = 0.1) -> Tensor:
    """InfoNCE over masked frames of one utterance.

    For each masked frame the true quantized target competes with up to
    ``distractors`` targets drawn uniformly without replacement from the
    other masked frames (all of them when fewer are available).
    """
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    m = idx.size
    if m == 0:
        raise ValueError("contrastive_loss: no masked frames")
    k = min(distractors, m - 1)
    if k == 0:
        return Tensor(0.0) * c.sum() if c.requires_grad else Tensor(0.0)
    keys = rng.random((m, m))
    np.fill_diagonal(keys, np.inf)
    picks = np.argsort(keys, axis=1)[:, :k]
    cand = np.concatenate([idx[:, None], idx[picks]], axis=1)  # (m, k+1), column 0 true
    cm = c[idx]
    qc = q[cand]
    sims = _cosine(T.expand_dims(cm, 1), qc) * (1.0 / temperature)
    return -T.log_softmax(sims, axis=-1)[:, 0].mean()


class ContrastiveHead(Module):
    """Pretraining-only head: quantizer for targets and a projection of C."""

    def __init__(self, dim: int, config: QuantizerConfig, rng: Rng):
        self.quantizer = Quantizer(dim, config, rng)
        self.final_proj = Linear(dim, dim, Role.OTHER, rng)
        self.claim("encoder", "pretrain_head")


@dataclass
class ContrastiveConfig:
    steps: int = 400
    batch_size: int = 8
    lr: float = 2e-3
    distractors: int = 10
    temperature: float = 0.1
    mask: MaskSpec = field(default_factory=lambda: MaskSpec(0.065, 4))
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)


def contrastive_step_loss(encoder: SpeechEncoder, head: ContrastiveHead, waves: list[np.ndarray],
                          cfg: ContrastiveConfig, rng: Rng) -> Tensor:
    lengths = np.array([len(w) for w in waves])
    batch = np.zeros((len(waves), lengths.max()))
    for i, w in enumerate(waves):
        batch[i, :len(w)] = w
    z, lat = encoder.encode_waveform(batch, lengths)
    masks = np.zeros(z.shape[:2], dtype=bool)
    for i, n in enumerate(lat):
        masks[i, :n] = sample_span_mask(int(n), cfg.mask, rng)
        if masks[i, :n].sum() < 2:
            masks[i, rng.choice(int(n), size=min(2, int(n)), replace=False)] = True
    pad = padding_mask(lat, z.shape[1])
    c = head.final_proj(encoder.contextualize(z, masks, pad if pad.any() else None))
    q, _ = head.quantizer(z)
    total, frames = None, 0
    for i in range(len(waves)):
        n_masked = int(masks[i].sum())
        li = contrastive_loss(c[i], q[i], masks[i], cfg.distractors, rng, cfg.temperature) * n_masked
        total = li if total is None else total + li
        frames += n_masked
    return total * (1.0 / frames)


def pretrain_contrastive(encoder: SpeechEncoder, waves: list[np.ndarray], cfg: ContrastiveConfig,
                         rng: Rng, head: ContrastiveHead | None = None) -> list[float]:
    """Self-supervised pretraining of ``encoder`` in place; returns per-step losses."""
    head = head or ContrastiveHead(encoder.dim, cfg.quantizer, rng.child("head"))
    params = encoder.parameters() + head.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, AdamConfig(lr=cfg.lr, warmup_steps=max(1, cfg.steps // 10)))
    order = rng.child("order")
    mask_rng = rng.child("mask")
    encoder.train()
    head.train()
    history = []
    for step in range(cfg.steps):
        pick = order.integers(0, len(waves), cfg.batch_size)
        loss = contrastive_step_loss(encoder, head, [waves[i] for i in pick], cfg, mask_rng)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        history.append(loss.item())
        if step % 50 == 0:
            log.debug("contrastive step %d loss %.4f", step, history[-1])
    return history


# -- log-mel front-end ---------------------------------------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(channels: int = 80, n_fft: int = 512, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters equally spaced on the mel scale, shape ``(channels, n_fft//2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), channels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def logmel_frontend(samples, sample_rate: int = SAMPLE_RATE, window_ms: float = 25.0,
                    shift_ms: float = 10.0, mel_channels: int = 80, cmvn: bool = True) -> np.ndarray:
    """80-channel log mel filterbank frames with utterance-level CMVN."""
    x = np.asarray(samples, dtype=np.float64)
    win = int(round(sample_rate * window_ms / 1000))
    hop = int(round(sample_rate * shift_ms / 1000))
    if x.size < win:
        raise ValueError(f"need at least {win} samples for one {window_ms} ms window, got {x.size}")
    n_fft = 1 << (win - 1).bit_length()
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.abs(np.fft.rfft(frames * np.hamming(win), n=n_fft)) ** 2
    feats = np.log(np.maximum(spec @ mel_filterbank(mel_channels, n_fft, sample_rate).T, 1e-10))
    if cmvn:
        feats = feats - feats.mean(axis=0)
        feats = feats / np.maximum(feats.std(axis=0), 1e-10)
    return feats


# -- WAV I/O -----------------------------------------------------------------
def read_wav(path: str | Path) -> np.ndarray:
    """Read 16-bit 16 kHz mono PCM as floats in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected 16-bit {SAMPLE_RATE} Hz mono PCM, got "
                             f"{w.getnchannels()} ch / {8 * w.getsampwidth()} bit / {w.getframerate()} Hz")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | Path, samples) -> None:
    x = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(x.tobytes())
