import numpy as np
import pytest

from speechbridge.adaptor import AdaptorConfig
from speechbridge.config import ExperimentConfig, PretrainConfig
from speechbridge.data import SynthTaskSpec, synth_generate
from speechbridge.decoder import DecoderConfig, DenoisingConfig
from speechbridge.pipeline import ModelConfig, SpeechTranslationModel
from speechbridge.rng import Rng
from speechbridge.speech import ContextEncoderConfig, ContrastiveConfig, FeatureEncoderConfig


def tiny_model_config(vocab_size=14, languages=("de",)) -> ModelConfig:
    return ModelConfig(
        feature=FeatureEncoderConfig([(8, 4, 4), (8, 4, 4)]),
        context=ContextEncoderConfig(layer_count=1, model_dim=8, head_count=2, ffn_dim=16, max_positions=64),
        adaptor=AdaptorConfig(2, 2, 3, 0.0, False, 8, 8),
        decoder=DecoderConfig(1, 8, 2, 16, vocab_size, list(languages), 32),
    )


def tiny_experiment(**changes) -> ExperimentConfig:
    spec = SynthTaskSpec(vocab_size=6, frames_per_token=4, samples_per_frame=16, min_tokens=2, max_tokens=4,
                         train_count=24, valid_count=8, test_count=8, pretrain_sentences=24)
    cfg = ExperimentConfig(
        model=tiny_model_config(),
        pretrain=PretrainConfig(True, ContrastiveConfig(steps=3, batch_size=4), DenoisingConfig(steps=3, batch_size=4)),
        steps=6, eval_interval=3, warmup_steps=2, batch_size=4, beam=2, max_decode_len=8,
    )
    cfg.data.synth = spec
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture
def tiny_model():
    return SpeechTranslationModel(tiny_model_config(), Rng(0))


@pytest.fixture
def tiny_dataset():
    return synth_generate(tiny_experiment().data.synth, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
