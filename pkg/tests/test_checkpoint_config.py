import numpy as np
import pytest

from duralign.checkpoint import (CheckpointFormatError, checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint,
                                 save_checkpoint)
from duralign.checks import MICRO_CONFIG
from duralign.config import ConfigError, RunConfig, known_keys, load_run_config, parse_config_text
from duralign.data import SyntheticCorpusSpec, generate_corpus, make_batch
from duralign.model import ModelConfig, Trainer, config_from_store, init_params, utterance_loss

MICRO = ModelConfig(**MICRO_CONFIG)


def _trained_store(steps=3):
    corpus = generate_corpus(SyntheticCorpusSpec(vocab_size=5, feature_dim=4, utterances=4, max_tokens=4))
    t = Trainer(MICRO)
    for _ in range(steps):
        t.train_step(make_batch(corpus))
    return t


def test_save_load_save_byte_identical(tmp_path):
    t = _trained_store()
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(t.store, t.step, a)
    store, step = load_checkpoint(a)
    assert step == 3
    save_checkpoint(store, step, b)
    assert a.read_bytes() == b.read_bytes()


def test_reload_reproduces_loss_bit_for_bit(tmp_path):
    t = _trained_store()
    corpus = generate_corpus(SyntheticCorpusSpec(vocab_size=5, feature_dim=4, utterances=2, seed=4))
    before = [float(utterance_loss(t.store, MICRO, u.token_ids, u.frames, 7, i, {})[0].data) for i, u in enumerate(corpus)]
    save_checkpoint(t.store, t.step, tmp_path / "m.ckpt")
    store, _ = load_checkpoint(tmp_path / "m.ckpt")
    after = [float(utterance_loss(store, MICRO, u.token_ids, u.frames, 7, i, {})[0].data) for i, u in enumerate(corpus)]
    assert before == after


def test_layout_and_buffers():
    store = init_params(MICRO)
    raw = checkpoint_to_bytes(store, 42)
    assert raw[:6] == b"PTAC2\x00"
    assert int.from_bytes(raw[6:10], "little") == 1
    assert int.from_bytes(raw[10:14], "little") == len(store)
    assert int.from_bytes(raw[-8:], "little") == 42
    loaded, step = checkpoint_from_bytes(raw)
    assert step == 42
    assert list(loaded) == list(store)
    assert not loaded["up.bn.running_var"].trainable and loaded["up.bn.scale"].trainable


def test_load_at_64_bit():
    store = init_params(MICRO)
    loaded, _ = checkpoint_from_bytes(checkpoint_to_bytes(store, 0), np.float64)
    assert loaded["enc.embed"].value.dtype == np.float64
    np.testing.assert_array_equal(loaded["enc.embed"].value, store["enc.embed"].value)


@pytest.mark.parametrize("mutate", [lambda r: r[:-1], lambda r: r + b"\x00", lambda r: b"PTAC3\x00" + r[6:],
                                    lambda r: r[:30]])
def test_corrupt_checkpoints(mutate):
    with pytest.raises(CheckpointFormatError):
        checkpoint_from_bytes(mutate(checkpoint_to_bytes(init_params(MICRO), 1)))


def test_structure_recovered_from_shapes():
    store = init_params(MICRO)
    cfg = config_from_store(store)
    for key in ("vocab_size", "model_dim", "feature_dim", "latent_dim", "decoder_blocks"):
        assert getattr(cfg, key) == getattr(MICRO, key)


# ---------------------------------------------------------------- config

def test_parse_and_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\nsteps = 50\ngamma = 0.1   # sharper\n\nvocab_size = 12\n")
    cfg = load_run_config(path, [("steps", "7"), ("cost-indexing", "symmetric")])
    assert cfg.steps == 7
    assert cfg.model.gamma == 0.1 and cfg.model.cost_indexing == "symmetric"
    assert cfg.model.vocab_size == cfg.corpus.vocab_size == 12


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_pairs([("bogus", "1")])


def test_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_pairs([("steps", "many")])
    with pytest.raises(ConfigError):
        parse_config_text("steps 10")
    with pytest.raises(ValueError):
        RunConfig.from_pairs([("decoder_conv_width", "4")])


def test_format_round_trips():
    cfg = RunConfig.from_pairs([("steps", "9"), ("lambda_dur", "3.5"), ("noise", "0.0")])
    again = RunConfig.from_pairs(parse_config_text(cfg.format()))
    assert again == cfg
    keys = [line.split(" = ")[0] for line in cfg.format().splitlines()]
    assert keys == sorted(keys) == known_keys()
