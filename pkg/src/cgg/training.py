"""BCE training with Adam, per-epoch history, and the binary checkpoint format."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .neuralcore.loss import bce_grad, bce_loss  # noqa: F401  (re-exported)
from .neuralcore.model import (DTYPES, ModelConfig, ModelParams, ShapeError, backward,
                               forward, predict)
from .preprocess import NormStats, SensorGraph, stack_samples

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 140
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dropout_seed: int = 1
    shuffle: bool = True
    checkpoint_every: int = 0
    # gradients of a batch are accumulated over chunks of this many samples
    micro_batch_size: int = 32
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or self.micro_batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    t = state.t + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new_arrays, m, v = {}, {}, {}
    for name, theta in params.arrays.items():
        g = grads[name]
        m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        step = cfg.learning_rate * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
        new_arrays[name] = (theta - step).astype(theta.dtype)
    return params.replace(new_arrays), AdamState(m, v, t)


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def best_epoch(self) -> Optional[int]:
        if not self.records:
            return None
        best = max(self.records, key=lambda r: (r.val_accuracy, -r.val_loss))
        return best.epoch

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.records], indent=1)

    @classmethod
    def from_json(cls, text):
        return cls([EpochRecord(**r) for r in json.loads(text)])


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``params`` holds the last good parameters."""

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


def batch_gradients(params, x, y, graph, rng, micro_batch_size=32):
    """Mean-BCE gradients of one batch, accumulated over fixed-order chunks.

    Returns (grads, training-mode loss).
    """
    total, loss_sum = None, 0.0
    n = len(y)
    for i in range(0, n, micro_batch_size):
        xb, yb = x[i:i + micro_batch_size], y[i:i + micro_batch_size]
        res = forward(params, xb, graph, training=True, rng=rng)
        g = backward(params, res, yb, n=n)
        loss_sum += bce_loss(res.probs, yb) * len(yb)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] += g[k]
    return total, loss_sum / n


def evaluate_loss_accuracy(params, x, y, graph, batch_size=256, threshold=0.5):
    probs = predict(params, x, graph, batch_size)
    acc = float(np.mean((probs >= threshold) == (y == 1)))
    return bce_loss(probs, y), acc


def train(params: ModelParams, split, graph: SensorGraph, cfg: TrainConfig,
          on_epoch_end: Optional[Callable] = None, state: Optional[AdamState] = None):
    """Mini-batch Adam on ``split.train``; history scored on train and val after each epoch.

    Deterministic given (data, params, cfg). The final short batch is kept.
    ``on_epoch_end(record, params, state)`` runs after every epoch.
    Raises ``TrainingDiverged`` carrying the last good parameters when the
    loss stops being finite.
    """
    if not split.train or not split.val:
        raise ValueError("training needs non-empty train and val sets")
    x_tr, y_tr = stack_samples(split.train)
    x_va, y_va = stack_samples(split.val)
    dtype = DTYPES[params.config.dtype]
    x_tr, x_va = x_tr.astype(dtype), x_va.astype(dtype)
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.dropout_seed)
    state = state or AdamState.zeros_like(params)
    history = TrainHistory()
    n = len(y_tr)

    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                grads, loss = batch_gradients(params, x_tr[idx], y_tr[idx], graph,
                                              dropout_rng, cfg.micro_batch_size)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss {loss}")
                params, state = adam_step(params, grads, state, cfg)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", params, history) from exc
        tr_loss, tr_acc = evaluate_loss_accuracy(params, x_tr, y_tr, graph, cfg.eval_batch_size)
        va_loss, va_acc = evaluate_loss_accuracy(params, x_va, y_va, graph, cfg.eval_batch_size)
        rec = EpochRecord(epoch, tr_loss, tr_acc, va_loss, va_acc)
        history.append(rec)
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f",
                 epoch, tr_loss, tr_acc, va_loss, va_acc)
        if on_epoch_end is not None:
            on_epoch_end(rec, params, state)
    return params, history


# ---------------------------------------------------------------- checkpoints

MAGIC = b"CGGCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, version, header length


class CheckpointError(ValueError):
    """Checkpoint file is truncated or malformed."""


class CheckpointVersionError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class CheckpointShapeError(CheckpointError, ShapeError):
    """Stored array shapes disagree with the expected configuration."""


@dataclass
class Checkpoint:
    params: ModelParams
    graph: SensorGraph
    norm_stats: Optional[NormStats] = None
    train_config: Optional[TrainConfig] = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(params: ModelParams, path, norm_stats=None, graph=None,
                    train_config=None, meta=None):
    """Magic, version, JSON header, then raw little-endian arrays in header order."""
    from .preprocess import default_sensor_graph

    graph = graph or default_sensor_graph()
    manifest = []
    blobs = []
    for name, arr in params.arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(le.tobytes())
    header = {
        "model_config": params.config.to_dict(),
        "train_config": asdict(train_config) if train_config else None,
        "norm_stats": norm_stats.to_dict() if norm_stats else None,
        "graph": graph.to_dict(),
        "arrays": manifest,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_config`` also verify every array shape against it."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointVersionError(f"{path}: not a CGG checkpoint (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + head_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    config = ModelConfig.from_dict(header["model_config"])
    declared = config.param_shapes()
    offset = start + head_len
    arrays = {}
    for entry in header["arrays"]:
        name, shape, dt = entry["name"], tuple(entry["shape"]), np.dtype(entry["dtype"])
        if declared.get(name) != shape:
            raise CheckpointShapeError(
                f"{path}: array {name} has shape {shape}, its embedded config implies {declared.get(name)}")
        nbytes = int(np.prod(shape)) * dt.itemsize
        if len(data) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated while reading {name}")
        arr = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=offset)
        arrays[name] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    if expected_config is not None:
        for name, shape in expected_config.param_shapes().items():
            if name not in arrays:
                raise CheckpointShapeError(f"{path}: checkpoint lacks array {name}")
            if arrays[name].shape != shape:
                raise CheckpointShapeError(
                    f"{path}: array {name} has shape {arrays[name].shape}, expected {shape}")

    params = ModelParams(config, arrays)
    tc = header.get("train_config")
    ns = header.get("norm_stats")
    return Checkpoint(
        params=params,
        graph=SensorGraph.from_dict(header["graph"]),
        norm_stats=NormStats.from_dict(ns) if ns else None,
        train_config=TrainConfig(**tc) if tc else None,
        meta=header.get("meta", {}),
    )
