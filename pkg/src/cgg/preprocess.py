"""Turn raw 16-channel recordings into labelled 8-node gait-cycle graphs.

Pipeline per recording: min-max normalise each sensor, take |left - right|
for each sensor pair, cut the series into consecutive 160-row windows. All
windows share one fixed sensor graph.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

N_NODES = 8
N_SENSORS = 16
WINDOW = 160
DEFAULT_RATIOS = (0.70, 0.15, 0.15)

# heel 0-2, midfoot 3-4, toes 5-7
DEFAULT_EDGES = ((0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4),
                 (3, 5), (4, 7), (5, 6), (6, 7), (5, 7))


class GraphValidationError(ValueError):
    pass


# ---------------------------------------------------------------- normalisation

@dataclass(frozen=True, eq=False)
class NormStats:
    min: np.ndarray
    max: np.ndarray
    fitted_on: str = "all"

    def __post_init__(self):
        lo = np.array(self.min, dtype=np.float64)
        hi = np.array(self.max, dtype=np.float64)
        if lo.shape != (N_SENSORS,) or hi.shape != (N_SENSORS,):
            raise ValueError(f"NormStats needs {N_SENSORS} minima and maxima")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("NormStats values must be finite")
        if np.any(lo > hi):
            raise ValueError("NormStats min exceeds max")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def degenerate(self) -> np.ndarray:
        """Sensors whose fitted range is empty; these normalise to 0."""
        return self.max == self.min

    def __eq__(self, other):
        return (isinstance(other, NormStats) and self.fitted_on == other.fitted_on
                and np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    def to_dict(self):
        return {"min": self.min.tolist(), "max": self.max.tolist(), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d):
        return cls(min=d["min"], max=d["max"], fitted_on=d.get("fitted_on", "all"))


def fit_normalizer_arrays(series, fitted_on="all") -> NormStats:
    """Per-sensor extrema over a list of [T, 16] arrays."""
    series = [np.asarray(s) for s in series if len(s)]
    if not series:
        raise ValueError("cannot fit a normaliser on no data")
    lo = np.min([s.min(axis=0) for s in series], axis=0)
    hi = np.max([s.max(axis=0) for s in series], axis=0)
    stats = NormStats(min=lo, max=hi, fitted_on=fitted_on)
    if stats.degenerate.any():
        log.warning("constant sensors %s will normalise to 0",
                    np.flatnonzero(stats.degenerate).tolist())
    return stats


def fit_normalizer(recordings, fitted_on="all") -> NormStats:
    """Global min/max of every sensor (L1..L8 -> 0..7, R1..R8 -> 8..15)."""
    if not recordings:
        raise ValueError("cannot fit a normaliser on an empty recording list")
    return fit_normalizer_arrays([r.sensors() for r in recordings], fitted_on)


def normalize_array(x, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite sensor values cannot be normalised")
    span = stats.max - stats.min
    safe = np.where(stats.degenerate, 1.0, span)
    # a subnormal span can overflow to inf, which the clip below handles
    with np.errstate(over="ignore"):
        out = (x - stats.min) / safe
    out[..., stats.degenerate] = 0.0
    return np.clip(out, 0.0, 1.0)


def normalize(recording, stats: NormStats) -> np.ndarray:
    """Min-max scale the 16 channels of ``recording`` into [0, 1]; returns [T, 16].

    Values outside the fitted range (stats fitted on another split) are
    clamped; constant sensors map to 0.
    """
    return normalize_array(recording.sensors(), stats)


def reduce_lr(series) -> np.ndarray:
    """|L_k - R_k| for each of the 8 sensor pairs: [T, 16] -> [T, 8]."""
    series = np.asarray(series)
    if series.shape[-1] != N_SENSORS:
        raise ValueError(f"expected {N_SENSORS} channels, got {series.shape[-1]}")
    return np.abs(series[..., :N_NODES] - series[..., N_NODES:])


def segment_cycles(series, window=WINDOW) -> list:
    """Consecutive non-overlapping windows, node-major: [T, C] -> list of [C, window].

    The trailing partial window is dropped; a series shorter than ``window``
    yields an empty list.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    series = np.asarray(series)
    n = series.shape[0] // window
    return [series[i * window:(i + 1) * window].T.copy() for i in range(n)]


# ---------------------------------------------------------------- graph

@dataclass(frozen=True)
class SensorGraph:
    n_nodes: int
    edges: tuple

    def __post_init__(self):
        canon = []
        for pair in self.edges:
            i, j = (int(v) for v in pair)
            for v in (i, j):
                if not 0 <= v < self.n_nodes:
                    raise GraphValidationError(f"node index {v} outside [0, {self.n_nodes - 1}]")
            if i == j:
                raise GraphValidationError(f"self-pair {i}-{j}; self-loops are added by the GAT layer")
            canon.append((min(i, j), max(i, j)))
        dupes = [e for e, c in Counter(canon).items() if c > 1]
        if dupes:
            raise GraphValidationError(f"duplicate edges: {dupes}")
        object.__setattr__(self, "edges", tuple(sorted(canon)))
        if not self._connected():
            raise GraphValidationError("graph is disconnected")

    def _connected(self):
        nbrs = self.neighborhoods
        seen, queue = {0}, deque([0])
        while queue:
            for j in nbrs[queue.popleft()]:
                if j not in seen:
                    seen.add(j)
                    queue.append(j)
        return len(seen) == self.n_nodes

    @property
    def neighborhoods(self) -> tuple:
        nbrs = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return tuple(tuple(sorted(n)) for n in nbrs)

    def attention_mask(self) -> np.ndarray:
        """Boolean [n, n] adjacency with self-loops."""
        mask = np.eye(self.n_nodes, dtype=bool)
        for i, j in self.edges:
            mask[i, j] = mask[j, i] = True
        return mask

    def permuted(self, perm) -> "SensorGraph":
        """Relabel node ``i`` as ``perm[i]``."""
        return SensorGraph(self.n_nodes, tuple((perm[i], perm[j]) for i, j in self.edges))

    def to_edge_list(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    def to_dict(self):
        return {"n_nodes": self.n_nodes, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_nodes"], tuple(tuple(e) for e in d["edges"]))


def parse_edge_list(text, n_nodes=N_NODES) -> SensorGraph:
    """Edge list with one ``i j`` pair per line (``i-j`` and comma-separated pairs also accepted)."""
    edges = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for chunk in line.split(","):
            parts = [p for p in re.split(r"[\s\-]+", chunk.strip()) if p]
            if len(parts) != 2 or not all(p.isdigit() for p in parts):
                raise GraphValidationError(f"line {lineno}: cannot read edge {chunk.strip()!r}")
            edges.append((int(parts[0]), int(parts[1])))
    return SensorGraph(n_nodes, tuple(edges))


def default_sensor_graph(path=None) -> SensorGraph:
    """The built-in 8-sensor adjacency, or the edge list stored at ``path``."""
    if path is not None:
        return parse_edge_list(Path(path).read_text())
    return SensorGraph(N_NODES, DEFAULT_EDGES)


# ---------------------------------------------------------------- samples and splits

@dataclass(frozen=True, eq=False)
class GaitCycleSample:
    features: np.ndarray
    label: int
    subject_id: str
    cycle_index: int
    cohort: Optional[str] = None
    severity: Optional[float] = None

    def __post_init__(self):
        f = np.array(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != N_NODES:
            raise ValueError(f"features must be [{N_NODES}, L], got {f.shape}")
        if not (np.all(f >= 0.0) and np.all(f <= 1.0)):
            raise ValueError("features must lie in [0, 1]")
        f.setflags(write=False)
        object.__setattr__(self, "features", f)

    @property
    def key(self):
        return (self.subject_id, self.cycle_index)

    def to_json(self) -> str:
        d = {"subject_id": self.subject_id, "cycle_index": self.cycle_index,
             "label": self.label, "features": self.features.tolist()}
        if self.cohort is not None:
            d["cohort"] = self.cohort
        if self.severity is not None:
            d["severity"] = self.severity
        return json.dumps(d)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(features=d["features"], label=int(d["label"]), subject_id=d["subject_id"],
                   cycle_index=int(d["cycle_index"]), cohort=d.get("cohort"),
                   severity=d.get("severity"))


def write_samples(samples, path):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_samples(path) -> list:
    with open(path) as fh:
        return [GaitCycleSample.from_json(line) for line in fh if line.strip()]


def stack_samples(samples):
    """(features [B, 8, L], labels [B]) from a list of samples."""
    x = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    return x, y


def largest_remainder(n, ratios) -> list:
    """Integer sizes summing to ``n`` proportional to ``ratios``.

    Floors first, then one extra item each to the largest fractional parts;
    ties go to the earlier split.
    """
    quotas = [n * r for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    # round the remainders so representation noise cannot break ties
    order = sorted(range(len(ratios)), key=lambda i: (-round(quotas[i] - sizes[i], 9), i))
    for i in order[:n - sum(sizes)]:
        sizes[i] += 1
    return sizes


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    ratios: tuple = DEFAULT_RATIOS
    seed: int = 0
    mode: str = "sample_level"

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def membership(self) -> dict:
        """Split manifest: the (subject_id, cycle_index) keys of each part."""
        return {
            "mode": self.mode, "seed": self.seed, "ratios": list(self.ratios),
            **{name: [list(s.key) for s in part]
               for name, part in (("train", self.train), ("val", self.val), ("test", self.test))},
        }


SPLIT_MODES = ("sample_level", "subject_level")


def split_dataset(samples, ratios=DEFAULT_RATIOS, seed=0, mode="sample_level") -> DatasetSplit:
    """Seeded train/val/test split.

    ``sample_level`` shuffles cycles independently; ``subject_level``
    shuffles subjects and keeps each subject's cycles together, sizing the
    parts by subject count.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if mode not in SPLIT_MODES:
        raise ValueError(f"mode must be one of {SPLIT_MODES}")
    rng = np.random.default_rng(seed)
    parts = []
    if mode == "sample_level":
        perm = rng.permutation(len(samples))
        start = 0
        for size in largest_remainder(len(samples), ratios):
            parts.append([samples[i] for i in perm[start:start + size]])
            start += size
    else:
        subjects = sorted({s.subject_id for s in samples})
        perm = rng.permutation(len(subjects))
        start, assign = 0, {}
        for k, size in enumerate(largest_remainder(len(subjects), ratios)):
            for i in perm[start:start + size]:
                assign[subjects[i]] = k
            start += size
        parts = [[s for s in samples if assign[s.subject_id] == k] for k in range(3)]
    return DatasetSplit(*parts, ratios=tuple(ratios), seed=seed, mode=mode)


@dataclass
class _RawCycle:
    features: np.ndarray  # [window, 16] before normalisation
    label: int
    subject_id: str
    cycle_index: int
    cohort: Optional[str]
    severity: Optional[float]


@dataclass
class PreprocessResult:
    split: DatasetSplit
    stats: NormStats
    counts: dict = field(default_factory=dict)


def build_dataset(recordings, window=WINDOW, ratios=DEFAULT_RATIOS, seed=0,
                  mode="sample_level", normalize_on="train") -> PreprocessResult:
    """Full preprocessing: segment, split, fit the normaliser, normalise and reduce.

    Normalisation and |L - R| are elementwise, so windows are cut from the
    raw series first; this lets the normaliser be fitted on the rows of the
    training windows only (``normalize_on="train"``) or on every recording
    (``"all"``).
    """
    if normalize_on not in ("train", "all"):
        raise ValueError("normalize_on must be 'train' or 'all'")
    raw = []
    for rec in recordings:
        for k, cyc in enumerate(segment_cycles(rec.sensors(), window)):
            raw.append(_RawCycle(cyc.T, rec.label, rec.subject_id, k, rec.cohort, rec.severity))
        if rec.n_rows < window:
            log.warning("%s: %d rows is shorter than one cycle", rec.subject_id, rec.n_rows)
    if not raw:
        raise ValueError("no complete gait cycles in the given recordings")
    raw_split = split_dataset(raw, ratios, seed, mode)
    if normalize_on == "train":
        stats = fit_normalizer_arrays([s.features for s in raw_split.train], "train")
    else:
        stats = fit_normalizer(recordings, "all")

    def finish(part):
        return [GaitCycleSample(features=reduce_lr(normalize_array(s.features, stats)).T,
                                label=s.label, subject_id=s.subject_id,
                                cycle_index=s.cycle_index, cohort=s.cohort,
                                severity=s.severity) for s in part]

    split = DatasetSplit(finish(raw_split.train), finish(raw_split.val), finish(raw_split.test),
                         ratios=raw_split.ratios, seed=seed, mode=mode)
    return PreprocessResult(split=split, stats=stats, counts=cycle_counts(raw, split))


def cycle_counts(samples, split=None) -> dict:
    """Cycle totals per cohort and class, plus split sizes when given."""
    per = {}
    for s in samples:
        entry = per.setdefault(s.cohort or "unknown", {"CO": 0, "PD": 0, "total": 0})
        entry["PD" if s.label == 1 else "CO"] += 1
        entry["total"] += 1
    out = {"per_cohort": dict(sorted(per.items())), "total": len(samples)}
    if split is not None:
        out["split"] = dict(zip(("train", "val", "test"), split.sizes()))
    return out
