import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cgg.gaitdata import (CatalogError, ParseError, RawRecording, SynthConfig, generate_synthetic,
                          load_catalog, manifest_from_physionet, parse_recording,
                          serialize_recording, write_recording, write_synthetic)

ROW0 = "0.00 1 1 1 1 1 1 1 1 2 2 2 2 2 2 2 2 8 16"
ROW1 = "0.01 3 3 3 3 3 3 3 3 4 4 4 4 4 4 4 4 24 32"


def test_parse_two_rows_maps_columns():
    rec = parse_recording(ROW0 + "\n" + ROW1 + "\n", "GaCo01", "Ga", 0)
    assert rec.n_rows == 2
    assert rec.left[0].tolist() == [1.0] * 8
    assert rec.right[0].tolist() == [2.0] * 8
    assert rec.total_left.tolist() == [8.0, 24.0]
    assert rec.total_right.tolist() == [16.0, 32.0]
    assert rec.sensors().shape == (2, 16)


def test_parse_accepts_tabs_and_blank_lines():
    text = ROW0.replace(" ", "\t") + "\n\n" + ROW1.replace(" ", "   ") + "\n"
    assert parse_recording(text, "x", "Ga", 0).n_rows == 2


def test_parse_short_row_names_line():
    short = " ".join(ROW1.split()[:18])
    with pytest.raises(ParseError, match="line 2") as err:
        parse_recording(ROW0 + "\n" + short + "\n", "x", "Ga", 0, source="f.txt")
    assert err.value.line == 2


def test_parse_non_numeric_names_line_and_value():
    bad = ROW1.replace("24", "abc")
    with pytest.raises(ParseError, match="line 2.*abc"):
        parse_recording(ROW0 + "\n" + bad, "x", "Ga", 0)


def test_parse_empty_file():
    with pytest.raises(ParseError, match="empty"):
        parse_recording("\n \n", "x", "Ga", 0)


def test_parse_rejects_negative_and_nonincreasing_time():
    with pytest.raises(ParseError):
        parse_recording(ROW0.replace(" 1 ", " -1 ", 1), "x", "Ga", 0)
    with pytest.raises(ParseError, match="increasing"):
        parse_recording(ROW0 + "\n" + ROW0, "x", "Ga", 0)


def test_recording_is_immutable():
    rec = parse_recording(ROW0, "x", "Ga", 0)
    with pytest.raises(ValueError):
        rec.left[0, 0] = 5.0


def test_recording_validates_metadata():
    kw = dict(timestamps=[0.0], left=np.ones((1, 8)), right=np.ones((1, 8)),
              total_left=[8.0], total_right=[8.0])
    with pytest.raises(ValueError, match="cohort"):
        RawRecording("x", "Zz", 0, **kw)
    with pytest.raises(ValueError, match="label"):
        RawRecording("x", "Ga", 2, **kw)
    with pytest.raises(ValueError, match="severity"):
        RawRecording("x", "Ga", 1, severity=7.0, **kw)


@st.composite
def recordings(draw):
    t = draw(st.integers(1, 12))
    forces = st.floats(0, 2000, allow_nan=False, allow_infinity=False)
    left = draw(arrays(np.float64, (t, 8), elements=forces))
    right = draw(arrays(np.float64, (t, 8), elements=forces))
    steps = draw(arrays(np.float64, (t,), elements=st.floats(0.001, 1.0)))
    return RawRecording("s", "Ju", draw(st.integers(0, 1)), timestamps=np.cumsum(steps),
                        left=left, right=right, total_left=left.sum(1), total_right=right.sum(1))


@given(recordings())
def test_serialize_parse_round_trip(rec):
    back = parse_recording(serialize_recording(rec, "%.17g"), rec.subject_id, rec.cohort, rec.label)
    assert back.same_as(rec)


def test_round_trip_default_precision(tmp_path):
    rec = generate_synthetic(SynthConfig(n_subjects_per_class=1, rows_per_subject=200))[0]
    write_recording(rec, tmp_path / "a.txt")
    back = parse_recording((tmp_path / "a.txt").read_text(), rec.subject_id, rec.cohort,
                           rec.label, rec.severity)
    assert back.same_as(rec, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), sep=st.floats(0, 1), noise=st.floats(0, 20))
def test_synthetic_totals_and_ranges(seed, sep, noise):
    cfg = SynthConfig(n_subjects_per_class=2, rows_per_subject=320, class_separation=sep,
                      noise_std=noise, seed=seed)
    for rec in generate_synthetic(cfg):
        assert np.array_equal(rec.total_left, rec.left.sum(axis=1))
        assert np.array_equal(rec.total_right, rec.right.sum(axis=1))
        assert np.all(np.isfinite(rec.sensors())) and np.all(rec.sensors() >= 0)


def test_synthetic_layout_and_determinism():
    cfg = SynthConfig(n_subjects_per_class=3, rows_per_subject=480, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert [r.subject_id for r in a] == ["SyCo001", "SyCo002", "SyCo003",
                                          "SyPt001", "SyPt002", "SyPt003"]
    assert [r.label for r in a] == [0, 0, 0, 1, 1, 1]
    assert all(x.same_as(y) for x, y in zip(a, b))
    c = generate_synthetic(SynthConfig(n_subjects_per_class=3, rows_per_subject=480, seed=6))
    assert not a[0].same_as(c[0])


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(rows_per_subject=100, cycle_period_rows=160)
    with pytest.raises(ValueError):
        SynthConfig(class_separation=1.5)
    with pytest.raises(ValueError):
        SynthConfig(noise_std=-1)


def test_write_synthetic_then_catalog(tmp_path):
    recs = generate_synthetic(SynthConfig(n_subjects_per_class=10, rows_per_subject=800))
    manifest = write_synthetic(recs, tmp_path)
    entries = json.loads(manifest.read_text())
    assert len(entries) == 20
    loaded = load_catalog(tmp_path, manifest)
    assert all(x.same_as(y, atol=1e-9) for x, y in zip(recs, loaded))


def test_catalog_reports_all_missing_files(tmp_path):
    manifest = {"a.txt": {"cohort": "Ga", "label": "CO"}, "b.txt": {"cohort": "Ga", "label": 1}}
    with pytest.raises(CatalogError, match="a.txt.*b.txt"):
        load_catalog(tmp_path, manifest)


def test_catalog_collects_parse_failures(tmp_path):
    (tmp_path / "a.txt").write_text(ROW0 + "\n")
    (tmp_path / "b.txt").write_text("1 2 3\n")
    (tmp_path / "c.txt").write_text("")
    manifest = {n: {"cohort": "Si", "label": "PD", "severity": "WIB"} for n in ("a.txt", "b.txt", "c.txt")}
    with pytest.raises(CatalogError, match="2 recording"):
        load_catalog(tmp_path, manifest)
    manifest.pop("b.txt"), manifest.pop("c.txt")
    (rec,) = load_catalog(tmp_path, manifest)
    assert rec.severity == 2.5 and rec.label == 1 and rec.subject_id == "a"


def test_manifest_from_physionet_names(tmp_path):
    for name in ("GaPt03_02.txt", "GaPt03_01.txt", "SiCo12_01.txt", "JuPt01_10.txt", "readme.txt"):
        (tmp_path / name).write_text(ROW0 + "\n")
    first = manifest_from_physionet(tmp_path, severities={"GaPt03": "WOIB"})
    assert sorted(first) == ["GaPt03_01.txt", "JuPt01_10.txt", "SiCo12_01.txt"]
    assert first["GaPt03_01.txt"] == {"subject_id": "GaPt03", "cohort": "Ga", "label": 1,
                                      "severity": "WOIB"}
    assert first["SiCo12_01.txt"]["label"] == 0
    every = manifest_from_physionet(tmp_path, walks="all")
    assert len(every) == 4
    recs = load_catalog(tmp_path, first)
    assert [r.subject_id for r in recs] == ["GaPt03", "JuPt01", "SiCo12"]
    assert recs[0].severity == 2.0
