"""Speech encoder -> adaptor -> text decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adaptor import Adaptor, AdaptorConfig, output_length
from .decoder import DecoderConfig, TextDecoder, decode_forward
from .nn import Module
from .rng import Rng
from .speech import ContextEncoderConfig, FeatureEncoderConfig, SpeechEncoder, padding_mask
from .tensor import Tensor


@dataclass
class ModelConfig:
    feature: FeatureEncoderConfig = field(default_factory=FeatureEncoderConfig)
    context: ContextEncoderConfig = field(default_factory=ContextEncoderConfig)
    adaptor: AdaptorConfig = field(default_factory=AdaptorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


class SpeechTranslationModel(Module):
    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.encoder = SpeechEncoder(config.feature, config.context, rng.child("encoder"))
        self.adaptor = Adaptor(config.adaptor, rng.child("adaptor"))
        self.decoder = TextDecoder(config.decoder, rng.child("decoder"))
        names = [n for n, _ in self.named_parameters()]
        assert names == [p.name for p in self.parameters()], "parameter names must match module paths"

    def encode(self, waves: np.ndarray, wave_lengths: np.ndarray, rng: Rng | None = None
               ) -> tuple[Tensor, np.ndarray, np.ndarray | None]:
        """Audio to decoder memory; returns memory, its lengths and its padding mask."""
        c, lat = self.encoder(waves, wave_lengths)
        mem, mem_lengths, dropped = self.adaptor(c, lat, rng)
        expected = np.array([output_length(int(n), self.adaptor.config, dropped) for n in lat])
        if not np.array_equal(expected, mem_lengths) or mem.shape[1] != mem_lengths.max():
            raise AssertionError(f"adaptor length mismatch: encoder {lat.tolist()} -> memory "
                                 f"{mem_lengths.tolist()}, expected {expected.tolist()}")
        pad = padding_mask(mem_lengths, mem.shape[1])
        return mem, mem_lengths, (pad if pad.any() else None)

    def forward(self, waves: np.ndarray, wave_lengths: np.ndarray, dec_in: np.ndarray,
                rng: Rng | None = None) -> Tensor:
        mem, _, pad = self.encode(waves, wave_lengths, rng)
        return decode_forward(self.decoder, dec_in, mem, pad)


def token_accuracy(logits: Tensor | np.ndarray, targets: np.ndarray, pad_id: int = 0) -> tuple[int, int]:
    data = logits.data if isinstance(logits, Tensor) else logits
    keep = targets != pad_id
    hits = (data.argmax(axis=-1) == targets) & keep
    return int(hits.sum()), int(keep.sum())


