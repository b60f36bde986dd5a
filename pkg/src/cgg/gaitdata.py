"""PhysioNet-format gait recordings: parsing, catalog loading, synthetic data.

A recording file holds whitespace-delimited rows of 19 numbers::

    time  L1 .. L8  R1 .. R8  total_left  total_right

sampled at 100 Hz, forces in Newtons. Labels and severity are kept out of
band in a JSON manifest that maps file names to metadata.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

N_COLUMNS = 19
SENSORS_PER_FOOT = 8
COHORTS = ("Ga", "Ju", "Si", "Synthetic")
LABELS = {"CO": 0, "PD": 1}
# Hoehn & Yahr stage code -> numeric stage
SEVERITIES = {"NFD": 0.0, "WOIB": 2.0, "WIB": 2.5, "WIPR": 3.0}


class ParseError(ValueError):
    """A recording file violates the 19-column format."""

    def __init__(self, message, line=None, source=None):
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.source = source


class CatalogError(ValueError):
    """The manifest and the files on disk disagree."""


@dataclass(frozen=True, eq=False)
class RawRecording:
    subject_id: str
    cohort: str
    label: int
    timestamps: np.ndarray
    left: np.ndarray
    right: np.ndarray
    total_left: np.ndarray
    total_right: np.ndarray
    severity: Optional[float] = None
    sample_rate_hz: float = 100.0

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValueError(f"unknown cohort {self.cohort!r}; expected one of {COHORTS}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (CO) or 1 (PD), got {self.label!r}")
        if self.severity is not None and float(self.severity) not in SEVERITIES.values():
            raise ValueError(f"severity {self.severity!r} is not a known H&Y stage")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        for name in ("timestamps", "left", "right", "total_left", "total_right"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        t = self.timestamps.shape[0]
        if t == 0:
            raise ValueError("recording has no rows")
        if self.left.shape != (t, SENSORS_PER_FOOT) or self.right.shape != (t, SENSORS_PER_FOOT):
            raise ValueError(
                f"sensor arrays must be [{t}, {SENSORS_PER_FOOT}], "
                f"got {self.left.shape} and {self.right.shape}")
        if self.total_left.shape != (t,) or self.total_right.shape != (t,):
            raise ValueError("total force columns must match the number of rows")
        forces = np.concatenate([self.left.ravel(), self.right.ravel(),
                                 self.total_left, self.total_right])
        if not np.all(np.isfinite(forces)) or not np.all(np.isfinite(self.timestamps)):
            raise ValueError(f"{self.subject_id}: non-finite values in recording")
        if np.any(forces < 0):
            raise ValueError(f"{self.subject_id}: negative force values")
        if t > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError(f"{self.subject_id}: timestamps are not strictly increasing")

    @property
    def n_rows(self) -> int:
        return self.timestamps.shape[0]

    def sensors(self) -> np.ndarray:
        """All 16 channels as [T, 16], left foot first."""
        return np.hstack([self.left, self.right])

    def same_as(self, other, atol=0.0) -> bool:
        if (self.subject_id, self.cohort, self.label, self.severity) != (
                other.subject_id, other.cohort, other.label, other.severity):
            return False
        pairs = [(self.timestamps, other.timestamps), (self.left, other.left),
                 (self.right, other.right), (self.total_left, other.total_left),
                 (self.total_right, other.total_right)]
        return all(a.shape == b.shape and np.allclose(a, b, rtol=0.0, atol=atol)
                   for a, b in pairs)


# ---------------------------------------------------------------- text format

def parse_recording(text, subject_id, cohort, label, severity=None,
                    sample_rate_hz=100.0, source=None) -> RawRecording:
    """Parse the 19-column text of one recording.

    Tabs and runs of spaces are both accepted as delimiters; blank lines are
    skipped. Raises ``ParseError`` naming the first bad line.
    """
    if not isinstance(text, str):
        text = text.read()
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != N_COLUMNS:
            raise ParseError(f"expected {N_COLUMNS} columns, found {len(parts)}",
                             line=lineno, source=source)
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            bad = next(v for v in parts if not _is_float(v))
            raise ParseError(f"non-numeric value {bad!r}", line=lineno, source=source) from None
    if not rows:
        raise ParseError("empty recording", source=source)
    data = np.array(rows, dtype=np.float64)
    try:
        return RawRecording(
            subject_id=subject_id, cohort=cohort, label=int(label),
            severity=None if severity is None else float(severity),
            sample_rate_hz=sample_rate_hz,
            timestamps=data[:, 0], left=data[:, 1:9], right=data[:, 9:17],
            total_left=data[:, 17], total_right=data[:, 18],
        )
    except ValueError as exc:
        raise ParseError(str(exc), source=source) from None


def _is_float(v):
    try:
        float(v)
    except ValueError:
        return False
    return True


def serialize_recording(rec: RawRecording, fmt="%.10g") -> str:
    data = np.column_stack([rec.timestamps, rec.left, rec.right,
                            rec.total_left, rec.total_right])
    return "".join("\t".join(fmt % v for v in row) + "\n" for row in data)


def read_recording(path, **meta) -> RawRecording:
    path = Path(path)
    with open(path) as fh:
        return parse_recording(fh.read(), source=path, **meta)


def write_recording(rec: RawRecording, path, fmt="%.10g"):
    with open(path, "w") as fh:
        fh.write(serialize_recording(rec, fmt))


# ---------------------------------------------------------------- manifest / catalog

def _severity_value(raw):
    if raw is None:
        return None
    if isinstance(raw, str):
        key = raw.strip().upper()
        if key in SEVERITIES:
            return SEVERITIES[key]
        raw = float(raw)
    return float(raw)


def _label_value(raw):
    if isinstance(raw, str):
        key = raw.strip().upper()
        if key not in LABELS:
            raise CatalogError(f"unknown label {raw!r}")
        return LABELS[key]
    return int(raw)


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if not isinstance(manifest, dict):
        raise CatalogError(f"{path}: manifest must be a JSON object keyed by file name")
    for name, entry in manifest.items():
        missing = {"cohort", "label"} - set(entry)
        if missing:
            raise CatalogError(f"{path}: entry {name!r} lacks {sorted(missing)}")
    return manifest


def load_catalog(root, manifest) -> list:
    """Parse every recording listed in ``manifest`` (a dict or a JSON path).

    Every missing file and every parse failure is reported together in one
    ``CatalogError`` instead of being dropped.
    """
    root = Path(root)
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    missing = [str(root / name) for name in manifest if not (root / name).is_file()]
    if missing:
        raise CatalogError("manifest references missing files: " + ", ".join(missing))
    recordings, failures = [], []
    for name, entry in manifest.items():
        try:
            recordings.append(read_recording(
                root / name,
                subject_id=entry.get("subject_id", Path(name).stem),
                cohort=entry["cohort"],
                label=_label_value(entry["label"]),
                severity=_severity_value(entry.get("severity")),
            ))
        except (ParseError, ValueError) as exc:
            failures.append(str(exc))
    if failures:
        raise CatalogError(f"{len(failures)} recording(s) failed to parse:\n" + "\n".join(failures))
    log.info("loaded %d recordings from %s", len(recordings), root)
    return recordings


_PHYSIONET_NAME = re.compile(r"^(Ga|Ju|Si)(Co|Pt)(\d+)_(\d+)\.txt$")


def manifest_from_physionet(root, walks="first", severities=None) -> dict:
    """Derive a manifest from PhysioNet gait file names such as ``GaPt03_01.txt``.

    ``walks="first"`` keeps one walk per subject (the lowest walk number);
    ``"all"`` keeps every walk. ``severities`` optionally maps subject ids
    (``GaPt03``) to H&Y stages, e.g. read from the demographics sheet.
    """
    if walks not in ("first", "all"):
        raise ValueError("walks must be 'first' or 'all'")
    severities = severities or {}
    chosen = {}
    for name in sorted(os.listdir(root)):
        m = _PHYSIONET_NAME.match(name)
        if not m:
            continue
        cohort, group, number, walk = m.groups()
        subject = f"{cohort}{group}{number}"
        if walks == "first" and subject in chosen and chosen[subject][0] <= int(walk):
            continue
        key = subject if walks == "first" else name
        chosen[key] = (int(walk), name, cohort, group, subject)
    manifest = {}
    for walk, name, cohort, group, subject in sorted(chosen.values(), key=lambda v: v[1]):
        manifest[name] = {
            "subject_id": subject,
            "cohort": cohort,
            "label": 1 if group == "Pt" else 0,
            "severity": severities.get(subject),
        }
    return manifest


# ---------------------------------------------------------------- synthetic data

# sensor windows inside the stance phase, as fractions of stance duration:
# heel (0-2) loads first, midfoot (3-4) next, toes (5-7) last
_SENSOR_WINDOWS = np.array([
    [0.00, 0.55], [0.00, 0.60], [0.02, 0.60],
    [0.15, 0.80], [0.15, 0.80],
    [0.40, 1.00], [0.42, 1.00], [0.45, 1.00],
])
_BASE_AMPLITUDE = np.array([180.0, 150.0, 150.0, 110.0, 110.0, 160.0, 120.0, 90.0])
_HEEL = np.array([1, 1, 1, 0, 0, 0, 0, 0], dtype=bool)
_TOE = np.array([0, 0, 0, 0, 0, 1, 1, 1], dtype=bool)


@dataclass(frozen=True)
class SynthConfig:
    n_subjects_per_class: int = 10
    rows_per_subject: int = 800
    cycle_period_rows: int = 160
    class_separation: float = 0.8
    noise_std: float = 4.0
    seed: int = 0
    stance_fraction: float = 0.6
    subject_jitter: float = 0.08
    # per-subject start offset, uniform in +-phase_jitter cycles
    phase_jitter: float = 0.05

    def __post_init__(self):
        if self.n_subjects_per_class < 1:
            raise ValueError("n_subjects_per_class must be positive")
        if self.cycle_period_rows < 1:
            raise ValueError("cycle_period_rows must be positive")
        if self.rows_per_subject < self.cycle_period_rows:
            raise ValueError("rows_per_subject must be at least one cycle long")
        if not 0.0 <= self.class_separation <= 1.0:
            raise ValueError("class_separation must lie in [0, 1]")
        if self.noise_std < 0 or self.subject_jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0.0 <= self.phase_jitter <= 0.5:
            raise ValueError("phase_jitter must lie in [0, 0.5]")
        if not 0.0 < self.stance_fraction < 1.0:
            raise ValueError("stance_fraction must lie in (0, 1)")


def _foot_pulses(phase, amplitude, stance, period):
    """Half-sine stance pulses for 8 sensors of one foot. phase: [T] rows."""
    pos = np.mod(phase, period) / (stance * period)  # stance progress, >1 in swing
    start, stop = _SENSOR_WINDOWS[:, 0], _SENSOR_WINDOWS[:, 1]
    u = (pos[:, None] - start) / (stop - start)
    active = (u >= 0.0) & (u <= 1.0)
    return np.where(active, amplitude * np.sin(np.pi * np.clip(u, 0.0, 1.0)), 0.0)


def _synthetic_subject(rng, cfg, label, subject_id):
    s = cfg.class_separation if label == 1 else 0.0
    period = cfg.cycle_period_rows
    t = cfg.rows_per_subject
    # PD: heavier heel loading, weaker toe-off, longer stance, left/right asymmetry
    shape = np.where(_HEEL, 1.0 + 0.35 * s, np.where(_TOE, 1.0 - 0.35 * s, 1.0))
    stance = min(cfg.stance_fraction + 0.08 * s, 0.95)
    weight = np.exp(rng.normal(0.0, cfg.subject_jitter))
    offset = rng.uniform(-cfg.phase_jitter, cfg.phase_jitter) * period
    feet = []
    for side, asym in ((0, 1.0 - 0.2 * s), (1, 1.0)):
        amp = _BASE_AMPLITUDE * shape * asym * weight
        amp = amp * np.exp(rng.normal(0.0, cfg.subject_jitter, size=SENSORS_PER_FOOT))
        phase = np.arange(t) + offset + side * period / 2.0
        clean = _foot_pulses(phase, amp, stance, period)
        noisy = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape)
        feet.append(np.round(np.clip(noisy, 0.0, None), 3))
    left, right = feet
    return RawRecording(
        subject_id=subject_id, cohort="Synthetic", label=label,
        severity=SEVERITIES["NFD"] if label == 0 else None,
        timestamps=np.arange(t) / 100.0,
        left=left, right=right,
        total_left=left.sum(axis=1), total_right=right.sum(axis=1),
    )


def generate_synthetic(cfg: SynthConfig) -> list:
    """Format-compatible synthetic recordings, CO subjects first then PD.

    Each sensor channel is a periodic half-sine stance pulse with Gaussian
    noise; the right foot lags the left by half a cycle. At
    ``class_separation=0`` both classes share one distribution.
    """
    rng = np.random.default_rng(cfg.seed)
    recordings = []
    for label, tag in ((0, "Co"), (1, "Pt")):
        for i in range(cfg.n_subjects_per_class):
            recordings.append(_synthetic_subject(rng, cfg, label, f"Sy{tag}{i + 1:03d}"))
    return recordings


def write_synthetic(recordings, out_dir) -> Path:
    """Write recordings as ``<subject>_01.txt`` plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for rec in recordings:
        name = f"{rec.subject_id}_01.txt"
        write_recording(rec, out_dir / name)
        manifest[name] = {"subject_id": rec.subject_id, "cohort": rec.cohort,
                          "label": rec.label, "severity": rec.severity}
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path
