import json

import pytest

from cgg.cli import ConfigError, RunConfig, load_config, main

TINY = {
    "synth": {"n_subjects_per_class": 3, "rows_per_subject": 480},
    "model": {"conv_channels": [3, 3, 3], "gru_hidden": 4, "gat_hidden": 4},
    "train": {"epochs": 2, "batch_size": 8},
    "explain": {"max_samples": 2},
    "gradcheck": {"seeds": 1, "layers": ["conv1d", "gat"]},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY))
    return path


def run(cfg_path, out, *cmds, extra=()):
    for cmd in cmds:
        rc = main([cmd, "--config", str(cfg_path), "--out", str(out), *extra])
        if rc != 0:
            return rc
    return 0


def test_synth_writes_parseable_files(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"synth": {"n_subjects_per_class": 10, "rows_per_subject": 800}}))
    assert run(path, tmp_path / "a", "synth") == 0
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert len(manifest) == 20
    assert run(path, tmp_path / "b", "synth") == 0
    for name in manifest:
        assert ((tmp_path / "a" / "data" / name).read_bytes()
                == (tmp_path / "b" / "data" / name).read_bytes())


def test_preprocess_counts_and_rerun(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"synth": {"n_subjects_per_class": 10, "rows_per_subject": 800}}))
    assert run(path, tmp_path / "o", "synth", "preprocess") == 0
    summary = json.loads((tmp_path / "o" / "processed" / "summary.json").read_text())
    assert summary["total"] == 100
    assert summary["split"] == {"train": 70, "val": 15, "test": 15}
    first = (tmp_path / "o" / "processed" / "split.json").read_bytes()
    assert run(path, tmp_path / "o", "preprocess") == 0
    assert (tmp_path / "o" / "processed" / "split.json").read_bytes() == first
    assert '"split"' in capsys.readouterr().out


def test_full_chain_outputs(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "synth", "preprocess", "train", "evaluate", "explain") == 0
    for name in ("checkpoint.cgg", "best.cgg", "history.json", "metrics_test.json",
                 "importance.jsonl", "importance_groups.json", "config.train.json"):
        assert (out / name).exists(), name
    assert len(json.loads((out / "history.json").read_text())) == 2
    report = json.loads((out / "metrics_test.json").read_text())
    assert set(report["confusion"]) == {"tp", "fp", "fn", "tn"}
    lines = (out / "importance.jsonl").read_text().splitlines()
    assert len(lines) == 2
    item = json.loads(lines[0])
    assert len(item["importance"]) == 8 and all(0 <= v <= 1 for v in item["importance"])
    echoed = json.loads((out / "config.train.json").read_text())
    assert echoed["paths"]["out_dir"] == str(out)
    assert echoed["model"]["gru_hidden"] == 4


def test_flags_override_config(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "synth", "preprocess",
               extra=("--seed", "9", "--split-mode", "subject")) == 0
    split = json.loads((out / "processed" / "split.json").read_text())
    assert split["mode"] == "subject_level" and split["seed"] == 9
    echoed = json.loads((out / "config.preprocess.json").read_text())
    assert echoed["synth"]["seed"] == echoed["model"]["seed"] == 9
    assert echoed["train"]["dropout_seed"] == 10


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"hidden": 3}}))
    with pytest.raises(ConfigError, match="hidden"):
        load_config(path)
    path.write_text(json.dumps({"extra": {}}))
    with pytest.raises(ConfigError, match="extra"):
        load_config(path)
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_config_round_trip():
    cfg = RunConfig.from_dict(TINY)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"preprocess": {"split_mode": "bogus"}})


def test_missing_inputs_fail_before_work(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "preprocess") == 2
    assert not (out / "config.preprocess.json").exists()
    assert run(cfg_path, out, "train") == 2
    assert run(cfg_path, out, "evaluate") == 2
    assert main(["evaluate", "--config", str(cfg_path), "--out", str(out),
                 "--checkpoint", str(tmp_path / "none.cgg")]) == 2


def test_bad_adjacency_rejected(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "synth") == 0
    edges = tmp_path / "edges.txt"
    edges.write_text("0-1,1-2\n")
    assert run(cfg_path, out, "preprocess", extra=("--adjacency", str(edges))) == 2
    edges.write_text("".join(f"{i} {i + 1}\n" for i in range(7)))
    assert run(cfg_path, out, "preprocess", extra=("--adjacency", str(edges))) == 0
    assert (out / "processed" / "graph.txt").read_text() == edges.read_text()


def test_checkpoint_shape_mismatch(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "synth", "preprocess", "train") == 0
    wide = dict(TINY, model={"conv_channels": [6, 6, 6], "gru_hidden": 4, "gat_hidden": 4})
    path = tmp_path / "wide.json"
    path.write_text(json.dumps(wide))
    assert run(path, out, "evaluate") == 2


def test_threshold_flag(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert run(cfg_path, out, "synth", "preprocess", "train") == 0
    assert run(cfg_path, out, "evaluate", extra=("--threshold", "0.0")) == 0
    report = json.loads((out / "metrics_test.json").read_text())
    assert report["threshold"] == 0.0
    assert report["confusion"]["tn"] == report["confusion"]["fn"] == 0


def test_gradcheck_command(cfg_path, tmp_path, capsys):
    out = tmp_path / "o"
    assert run(cfg_path, out, "gradcheck") == 0
    reports = json.loads((out / "gradcheck.json").read_text())
    assert {r["layer"] for r in reports} == {"conv1d", "gat"}
    assert all(r["passed"] and r["max_rel_err"] <= 1e-4 for r in reports)


def test_gradcheck_failure_exit_code(cfg_path, tmp_path, monkeypatch):
    from cgg.neuralcore import gradcheck
    monkeypatch.setattr(gradcheck, "TOLERANCE", 0.0)
    assert run(cfg_path, tmp_path / "o", "gradcheck") == 1
