import math

import numpy as np
import pytest

from speechbridge.adaptor import output_length
from speechbridge.checkpoint import load_checkpoint
from speechbridge.evaluation import evaluate
from speechbridge.pipeline import SpeechTranslationModel
from speechbridge.rng import Rng
from speechbridge.training import (
    CURVE_COLUMNS, TrainingError, model_from_checkpoint, parameter_checksum, train, training_pairs,
)

from conftest import tiny_experiment, tiny_model_config


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    from speechbridge.data import synth_generate
    cfg = tiny_experiment(lr_candidates=[1e-3, 1e-2])
    ds = synth_generate(cfg.data.synth, cfg.data.seed)
    out = tmp_path_factory.mktemp("run")
    return cfg, ds, train(cfg, ds, out), out


def test_outputs_written(tiny_run):
    _, _, result, out = tiny_run
    assert (out / "checkpoint_best.bin").exists()
    lines = (out / "learning_curve.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(CURVE_COLUMNS)
    assert len(lines) == 1 + sum(len(c.curve) for c in result.candidates)


def test_sweep_selects_lowest_validation_loss(tiny_run):
    _, _, result, _ = tiny_run
    best = min(c.best_valid for c in result.candidates if not c.failed)
    assert result.checkpoint.best_valid == best
    assert result.best_lr in (1e-3, 1e-2)
    chosen = next(c for c in result.candidates if c.lr == result.best_lr)
    assert chosen.best_valid == best
    assert chosen.best_valid == min(p.valid_loss for p in chosen.curve)


def test_checkpoint_round_trip_gives_same_bleu(tiny_run):
    cfg, ds, result, out = tiny_run
    ckpt = load_checkpoint(out / "checkpoint_best.bin")
    model, _, back_cfg = model_from_checkpoint(ckpt)
    assert back_cfg.to_dict() == cfg.to_dict()
    assert parameter_checksum(model) == parameter_checksum(result.model)
    a = evaluate(result.model, ds, "test", beam=2, max_len=8)
    b = evaluate(out / "checkpoint_best.bin", ds, "test", beam=2, max_len=8)
    assert a.bleu == b.bleu and a.hypotheses == b.hypotheses


def test_seed_identical_reruns_are_identical(tiny_run):
    cfg, ds, result, _ = tiny_run
    again = train(cfg, ds)
    assert parameter_checksum(again.model) == parameter_checksum(result.model)
    assert [p.valid_loss for c in again.candidates for p in c.curve] == \
           [p.valid_loss for c in result.candidates for p in c.curve]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_candidate_is_marked_failed(tiny_dataset):
    cfg = tiny_experiment(lr_candidates=[math.inf, 1e-3], pretrain={"enabled": False})
    result = train(cfg, tiny_dataset)
    bad, good = result.candidates
    assert bad.failed and "nan" in bad.reason.lower()
    assert not good.failed and result.best_lr == 1e-3
    with pytest.raises(TrainingError, match="every learning-rate candidate failed"):
        train(cfg.replace(lr_candidates=[math.inf]), tiny_dataset)


def test_frozen_strategy_trains_nothing(tiny_dataset):
    cfg = tiny_experiment(strategy="frozen", pretrain={"enabled": False})
    before = SpeechTranslationModel(tiny_model_config(vocab_size=len(tiny_dataset.vocab)), Rng(0).child("model"))
    result = train(cfg, tiny_dataset)
    assert parameter_checksum(result.model) == parameter_checksum(before)


def test_bilingual_mode_needs_one_pair(tiny_dataset):
    from speechbridge.data import synth_generate
    cfg = tiny_experiment()
    cfg.data.synth.pairs = ["en-de", "en-fr"]
    two = synth_generate(cfg.data.synth, 0)
    with pytest.raises(TrainingError, match="exactly one pair"):
        training_pairs(cfg, two)
    assert training_pairs(cfg.replace(mode="multilingual"), two) == ["en-de", "en-fr"]
    with pytest.raises(TrainingError, match="no training rows"):
        training_pairs(tiny_experiment(pairs=["en-xx"]), tiny_dataset)


def test_encode_lengths_follow_adaptor_formula(tiny_model):
    waves = np.random.default_rng(0).normal(size=(3, 256))
    lengths = np.array([256, 200, 130])
    mem, mem_lengths, pad = tiny_model.eval().encode(waves, lengths)
    lat = [tiny_model.config.feature.output_length(int(n)) for n in lengths]
    assert mem_lengths.tolist() == [output_length(n, tiny_model.config.adaptor) for n in lat]
    assert mem.shape[1] == max(mem_lengths) and pad is not None


def test_evaluate_rejects_unknown_language(tiny_run):
    _, ds, result, _ = tiny_run
    from speechbridge.nn import ConfigurationError
    row = ds.splits["test"][0]
    row_lang = row.tgt_lang
    row.tgt_lang = "xx"
    try:
        with pytest.raises(ConfigurationError, match="no tag"):
            evaluate(result.model, ds, "test", beam=1, max_len=4)
    finally:
        row.tgt_lang = row_lang
