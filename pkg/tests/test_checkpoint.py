import numpy as np
import pytest

from speechbridge.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def sample():
    rng = np.random.default_rng(0)
    return Checkpoint(config={"a": 1, "nested": {"b": [1, 2]}},
                      params={"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)},
                      optimizer={"m:w": np.zeros((3, 4)), "v:w": np.ones((3, 4))},
                      optimizer_step=7, step=42, best_valid=1.25)


def test_round_trip_is_bit_identical(tmp_path):
    ck = sample()
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.config == ck.config
    assert (back.step, back.best_valid, back.optimizer_step) == (42, 1.25, 7)
    for src, dst in ((ck.params, back.params), (ck.optimizer, back.optimizer)):
        assert list(src) == list(dst)
        for k in src:
            assert src[k].shape == dst[k].shape
            assert src[k].tobytes() == dst[k].tobytes()


def test_rejects_foreign_and_future_files(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(bad)
    good = tmp_path / "good.bin"
    save_checkpoint(good, sample())
    raw = bytearray(good.read_bytes())
    raw[8] = 99
    good.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(good)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.bin"):
        load_checkpoint(tmp_path / "nope.bin")


def test_overwrite_leaves_no_temporaries(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, sample())
    ck = sample()
    ck.step = 99
    save_checkpoint(path, ck)
    assert load_checkpoint(path).step == 99
    assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]
