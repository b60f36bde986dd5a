import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgg import training
from cgg.neuralcore.model import ModelConfig, init_params
from cgg.preprocess import DatasetSplit, GaitCycleSample, NormStats, default_sensor_graph
from cgg.training import (AdamState, CheckpointError, CheckpointShapeError, CheckpointVersionError,
                          TrainConfig, TrainHistory, TrainingDiverged, adam_step, load_checkpoint,
                          save_checkpoint, train)

SMALL = ModelConfig(conv_channels=(3, 3, 3), gru_hidden=4, gat_hidden=4, seq_len=16)


def toy_split(n=12, seed=0, length=16):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        label = i % 2
        f = rng.uniform(0, 0.5, size=(8, length)) + 0.4 * label
        samples.append(GaitCycleSample(np.clip(f, 0, 1), label, f"s{i}", 0))
    return DatasetSplit(samples[:8], samples[8:], [])


def test_adam_hand_computed_first_step():
    cfg = ModelConfig(conv_channels=(1,), gru_hidden=1, gat_hidden=1, seq_len=4)
    params = init_params(cfg)
    zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    params = params.replace(zeros)
    grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
    new, state = adam_step(params, grads, AdamState.zeros_like(params),
                           TrainConfig(learning_rate=0.1))
    for v in new.arrays.values():
        assert np.allclose(v, -0.1, rtol=0, atol=1e-8)
    assert state.t == 1
    assert np.all(params["fc.bias"] == 0.0)  # inputs untouched


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), lr=st.floats(1e-5, 1.0), steps=st.integers(1, 4))
def test_adam_zero_gradient_is_identity(seed, lr, steps):
    params = init_params(SMALL, seed)
    state = AdamState.zeros_like(params)
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    new = params
    for _ in range(steps):
        new, state = adam_step(new, grads, state, TrainConfig(learning_rate=lr))
    assert new.equals(params)
    assert state.t == steps
    assert all(np.all(v >= 0) for v in state.v.values())


def test_adam_deterministic_and_rejects_nan():
    params = init_params(SMALL)
    rng = np.random.default_rng(0)
    grads = {k: rng.normal(size=v.shape) for k, v in params.arrays.items()}
    state = AdamState.zeros_like(params)
    a = adam_step(params, grads, state.copy(), TrainConfig())
    b = adam_step(params, grads, state.copy(), TrainConfig())
    assert a[0].equals(b[0])
    grads["fc.bias"][0] = np.nan
    with pytest.raises(FloatingPointError, match="fc.bias"):
        adam_step(params, grads, state, TrainConfig())


def test_train_config_validation():
    for bad in (dict(batch_size=0), dict(learning_rate=0), dict(beta1=1.0), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_train_history_and_determinism():
    split, graph = toy_split(), default_sensor_graph()
    cfg = TrainConfig(epochs=3, batch_size=3, learning_rate=0.01, micro_batch_size=2)
    seen = []
    p1, h1 = train(init_params(SMALL), split, graph, cfg,
                   on_epoch_end=lambda rec, p, s: seen.append(rec.epoch))
    p2, h2 = train(init_params(SMALL), split, graph, cfg)
    assert len(h1) == 3 and seen == [1, 2, 3]
    assert h1.to_json() == h2.to_json()
    assert p1.equals(p2)
    assert TrainHistory.from_json(h1.to_json()).records == h1.records
    assert h1.best_epoch() in (1, 2, 3)


def test_micro_batching_matches_whole_batch():
    # without dropout the chunking is the only difference
    split, graph = toy_split(), default_sensor_graph()
    params = init_params(ModelConfig(conv_channels=(3, 3, 3), gru_hidden=4, gat_hidden=4,
                                     seq_len=16, dropout=0.0))
    x = np.stack([s.features for s in split.train])
    y = np.array([float(s.label) for s in split.train])
    g1, l1 = training.batch_gradients(params, x, y, graph, np.random.default_rng(0), 8)
    g2, l2 = training.batch_gradients(params, x, y, graph, np.random.default_rng(0), 3)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=1e-9, atol=1e-15)


def test_train_needs_data():
    with pytest.raises(ValueError):
        train(init_params(SMALL), DatasetSplit(toy_split().train, [], []),
              default_sensor_graph(), TrainConfig(epochs=1))


def test_divergence_keeps_last_good_params(monkeypatch):
    calls = {"n": 0}
    real = training.batch_gradients

    def flaky(*args, **kw):
        calls["n"] += 1
        grads, loss = real(*args, **kw)
        return grads, (np.nan if calls["n"] == 3 else loss)

    monkeypatch.setattr(training, "batch_gradients", flaky)
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.01)
    with pytest.raises(TrainingDiverged) as err:
        train(init_params(SMALL), toy_split(), default_sensor_graph(), cfg)
    assert len(err.value.history) == 1  # epoch 1 completed (2 batches), epoch 2 diverged
    assert not err.value.params.equals(init_params(SMALL))


# ---------------------------------------------------------------- checkpoints

def stats():
    return NormStats(np.arange(16.0), np.arange(16.0) + 5, "train")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = init_params(SMALL, 7)
    graph = default_sensor_graph()
    save_checkpoint(params, tmp_path / "m.cgg", stats(), graph, TrainConfig(epochs=3),
                    meta={"epoch": 3})
    ck = load_checkpoint(tmp_path / "m.cgg", expected_config=SMALL)
    assert ck.params.equals(params)
    assert ck.norm_stats == stats() and ck.graph == graph
    assert ck.train_config == TrainConfig(epochs=3) and ck.meta == {"epoch": 3}
    save_checkpoint(ck.params, tmp_path / "n.cgg", ck.norm_stats, ck.graph, ck.train_config,
                    ck.meta)
    assert (tmp_path / "m.cgg").read_bytes() == (tmp_path / "n.cgg").read_bytes()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), dtype=st.sampled_from(["float64", "float32"]))
def test_checkpoint_round_trip_property(tmp_path_factory, seed, dtype):
    cfg = ModelConfig(conv_channels=(2,), gru_hidden=3, gat_hidden=2, seq_len=8, dtype=dtype)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for v in params.arrays.values():
        v[...] = rng.normal(size=v.shape) * 1e3
    path = tmp_path_factory.mktemp("ck") / "x.cgg"
    save_checkpoint(params, path)
    assert load_checkpoint(path).params.equals(params)


def test_checkpoint_bad_magic_and_version(tmp_path):
    path = tmp_path / "m.cgg"
    save_checkpoint(init_params(SMALL), path)
    data = bytearray(path.read_bytes())
    bad = bytearray(data)
    bad[0:3] = b"XYZ"
    (tmp_path / "bad.cgg").write_bytes(bytes(bad))
    with pytest.raises(CheckpointVersionError, match="magic"):
        load_checkpoint(tmp_path / "bad.cgg")
    bad = bytearray(data)
    bad[8] = 99
    (tmp_path / "v.cgg").write_bytes(bytes(bad))
    with pytest.raises(CheckpointVersionError, match="version 99"):
        load_checkpoint(tmp_path / "v.cgg")


def test_checkpoint_truncated_and_trailing(tmp_path):
    path = tmp_path / "m.cgg"
    save_checkpoint(init_params(SMALL), path)
    data = path.read_bytes()
    for cut in (5, 40, len(data) - 3):
        (tmp_path / "t.cgg").write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "t.cgg")
    (tmp_path / "x.cgg").write_bytes(data + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "x.cgg")


def test_checkpoint_width_mismatch_names_array(tmp_path):
    narrow = ModelConfig(conv_channels=(32, 32, 32), gru_hidden=4, gat_hidden=4, seq_len=16)
    wide = ModelConfig(conv_channels=(64, 64, 64), gru_hidden=4, gat_hidden=4, seq_len=16)
    save_checkpoint(init_params(narrow), tmp_path / "m.cgg")
    with pytest.raises(CheckpointShapeError, match="conv0.weight"):
        load_checkpoint(tmp_path / "m.cgg", expected_config=wide)
