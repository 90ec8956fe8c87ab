import pytest

from speechbridge.config import ExperimentConfig, PRESETS, load_config, save_config


def test_yaml_round_trip(tmp_path):
    cfg = ExperimentConfig(strategy="ln+ea", lr_candidates=[1e-3, 3e-3], seed=4)
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.model.feature.layers == cfg.model.feature.layers


def test_missing_config_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")


def test_partial_yaml_fills_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("steps: 5\nmodel:\n  adaptor:\n    layer_count: 2\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.steps == 5 and cfg.model.adaptor.layer_count == 2
    assert cfg.batch_size == ExperimentConfig().batch_size


@pytest.mark.parametrize("bad", [{"strategy": "nope"}, {"mode": "trilingual"}, {"lr_candidates": []},
                                 {"unknown_key": 1}])
def test_invalid_configs_raise(bad):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({**ExperimentConfig().to_dict(), **bad})


def test_custom_strategy_dict():
    cfg = ExperimentConfig(strategy={"name": "mine", "encoder_roles": ["layer_norm"], "decoder_roles": "all"})
    s = cfg.finetune_strategy()
    assert s.name == "mine" and s.decoder_roles == "all"
    assert set(PRESETS) >= {"best", "all", "frozen"}
