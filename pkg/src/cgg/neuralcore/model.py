"""The CGG network: conv stack -> 2-layer GRU -> 2 GAT layers -> mean pool -> sigmoid.

Each node's 160-step signal runs through the conv and GRU stages on its
own; the GAT layers then mix node states along the sensor graph.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from .layers import ShapeError
from .loss import bce_grad

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int = 8
    seq_len: int = 160
    kernel_size: int = 3
    conv_channels: tuple = (32, 32, 32)
    gru_hidden: int = 256
    gru_layers: int = 2
    gat_hidden: int = 256
    gat_layers: int = 2
    leaky_slope: float = 0.2
    dropout: float = 0.2
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if not self.conv_channels or self.gru_layers < 1 or self.gat_layers < 1:
            raise ValueError("the network needs at least one conv, GRU and GAT layer")
        if self.conv_lengths()[-1] < 1:
            raise ValueError(f"seq_len {self.seq_len} too short for {len(self.conv_channels)} "
                             f"conv layers of kernel {self.kernel_size}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    def conv_lengths(self) -> list:
        """Sequence length after each conv layer (160 -> 158 -> 156 -> 154 by default)."""
        return [self.seq_len - (i + 1) * (self.kernel_size - 1)
                for i in range(len(self.conv_channels))]

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def param_shapes(self) -> dict:
        """Name -> shape of every learnable array, in canonical order."""
        shapes = {}
        c_in = 1
        for i, c_out in enumerate(self.conv_channels):
            shapes[f"conv{i}.weight"] = (c_out, c_in, self.kernel_size)
            shapes[f"conv{i}.bias"] = (c_out,)
            c_in = c_out
        d_in, h = c_in, self.gru_hidden
        for i in range(self.gru_layers):
            for gate in ("z", "r", "h"):
                shapes[f"gru{i}.W_{gate}"] = (h, h + d_in)
            for gate in ("z", "r", "h"):
                shapes[f"gru{i}.b_{gate}"] = (h,)
            d_in = h
        for i in range(self.gat_layers):
            shapes[f"gat{i}.W"] = (self.gat_hidden, d_in)
            shapes[f"gat{i}.a"] = (2 * self.gat_hidden,)
            d_in = self.gat_hidden
        shapes["fc.weight"] = (1, d_in)
        shapes["fc.bias"] = (1,)
        return shapes


def param_count_formula(cfg: ModelConfig) -> int:
    """Closed-form parameter total, independent of ``param_shapes``.

    conv: C_out*(C_in*K + 1); GRU: 3*H*(H + D + 1); GAT: G*D + 2*G; head: D + 1.
    """
    total, c_in = 0, 1
    for c_out in cfg.conv_channels:
        total += c_out * (c_in * cfg.kernel_size + 1)
        c_in = c_out
    d, h = c_in, cfg.gru_hidden
    for _ in range(cfg.gru_layers):
        total += 3 * h * (h + d + 1)
        d = h
    g = cfg.gat_hidden
    for _ in range(cfg.gat_layers):
        total += g * d + 2 * g
        d = g
    return total + d + 1


@dataclass(eq=False)
class ModelParams:
    config: ModelConfig
    arrays: dict

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.arrays) != list(expected):
            raise ShapeError(f"parameter names {list(self.arrays)} do not match the config")
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise ShapeError(f"parameter {name} has shape {self.arrays[name].shape}, "
                                 f"expected {shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def layer(self, prefix) -> dict:
        """Arrays of one layer with the prefix stripped, e.g. ``layer("gru0")["W_z"]``."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}

    def replace(self, arrays) -> "ModelParams":
        return ModelParams(self.config, dict(arrays))

    def copy(self) -> "ModelParams":
        return self.replace({k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other) -> bool:
        return (self.config == other.config and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(v, other.arrays[k]) and v.dtype == other.arrays[k].dtype
                        for k, v in self.arrays.items()))


def _fans(name, shape):
    if name.startswith("conv"):
        c_out, c_in, k = shape
        return c_in * k, c_out * k
    if name.endswith(".a"):
        return shape[0], 1
    return shape[1], shape[0]


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Glorot-uniform weights, bound sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dtype = DTYPES[cfg.dtype]
    arrays = {}
    for name, shape in cfg.param_shapes().items():
        if ".b" in name:
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(cfg, arrays)


def init_bounds(cfg: ModelConfig) -> dict:
    return {name: np.sqrt(6.0 / sum(_fans(name, shape)))
            for name, shape in cfg.param_shapes().items() if ".b" not in name}


def param_count(params) -> int:
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return int(sum(v.size for v in arrays.values()))


# ---------------------------------------------------------------- forward / backward

@dataclass
class ForwardResult:
    probs: np.ndarray            # [B]
    logits: np.ndarray           # [B]
    node_embeddings: np.ndarray  # final GAT output before dropout, [B, n, G]
    attention: list              # one [B, n, n] array per GAT layer
    cache: Optional[dict] = field(default=None, repr=False)


def _validate_input(cfg, x, graph):
    if x.ndim != 3 or x.shape[1:] != (cfg.n_nodes, cfg.seq_len):
        raise ShapeError(f"expected features [B, {cfg.n_nodes}, {cfg.seq_len}], got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    if graph.n_nodes != cfg.n_nodes:
        raise ShapeError(f"graph has {graph.n_nodes} nodes, model expects {cfg.n_nodes}")


def forward(params: ModelParams, x, graph, training=False, rng=None, keep_cache=None) -> ForwardResult:
    """Probabilities for a batch ``x`` [B, n, L].

    Dropout follows the conv stack, the GRU output and every GAT layer, and
    is only active with ``training=True`` (which needs ``rng``). The cache
    for ``backward`` is kept in training mode unless ``keep_cache`` says
    otherwise.
    """
    cfg = params.config
    x = np.asarray(x, dtype=DTYPES[cfg.dtype])
    _validate_input(cfg, x, graph)
    keep = training if keep_cache is None else keep_cache
    p = cfg.dropout
    b, n, length = x.shape
    cache = {}

    h = x.reshape(b * n, 1, length)
    for i in range(len(cfg.conv_channels)):
        h, cache[f"conv{i}"] = L.conv1d_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        h, cache[f"relu{i}"] = L.relu_forward(h)
    h, cache["drop_conv"] = L.dropout_forward(h, p, rng, training)

    seq = h.transpose(0, 2, 1)  # [B*n, T, C]
    for i in range(cfg.gru_layers):
        seq, cache[f"gru{i}"] = L.gru_sequence_forward(seq, params.layer(f"gru{i}"))
    h = seq[:, -1, :].reshape(b, n, cfg.gru_hidden)
    h, cache["drop_gru"] = L.dropout_forward(h, p, rng, training)

    mask = graph.attention_mask()
    attention = []
    for i in range(cfg.gat_layers):
        h, alpha, cache[f"gat{i}"] = L.gat_forward(
            h, params[f"gat{i}.W"], params[f"gat{i}.a"], mask, cfg.leaky_slope)
        attention.append(alpha)
        embeddings = h
        h, cache[f"drop_gat{i}"] = L.dropout_forward(h, p, rng, training)

    pooled, cache["pool"] = L.mean_pool_forward(h)
    probs, logits = L.dense_sigmoid_forward(pooled, params["fc.weight"], params["fc.bias"])
    cache["pooled"] = pooled
    cache["shape"] = (b, n, length)
    return ForwardResult(probs=probs, logits=logits, node_embeddings=embeddings,
                         attention=attention, cache=cache if keep else None)


def backward(params: ModelParams, result: ForwardResult, labels, n=None, return_input_grad=False):
    """Exact gradients of the mean BCE of ``result.probs`` against ``labels``.

    Reuses the dropout masks drawn in the forward pass. ``n`` sets the
    averaging count when a batch is processed in chunks.
    """
    if result.cache is None:
        raise RuntimeError("backward needs a forward pass run with keep_cache=True")
    cfg, cache = params.config, result.cache
    b, n_nodes, length = cache["shape"]
    grads = {}

    dlogits = bce_grad(result.probs, labels, wrt="logit", n=n).astype(result.probs.dtype)
    dpooled, grads["fc.weight"], grads["fc.bias"] = L.dense_backward(
        dlogits, cache["pooled"], params["fc.weight"])
    dh = L.mean_pool_backward(dpooled, cache["pool"])

    for i in reversed(range(cfg.gat_layers)):
        dh = L.dropout_backward(dh, cache[f"drop_gat{i}"])
        dh, grads[f"gat{i}.W"], grads[f"gat{i}.a"] = L.gat_backward(dh, cache[f"gat{i}"])

    dh = L.dropout_backward(dh, cache["drop_gru"])
    x_seq = cache["gru0"][0]
    steps = x_seq.shape[1]
    dseq = np.zeros((b * n_nodes, steps, cfg.gru_hidden), dtype=dh.dtype)
    dseq[:, -1, :] = dh.reshape(b * n_nodes, cfg.gru_hidden)
    for i in reversed(range(cfg.gru_layers)):
        dseq, _, layer_grads = L.gru_sequence_backward(dseq, cache[f"gru{i}"])
        for k, v in layer_grads.items():
            grads[f"gru{i}.{k}"] = v

    dh = L.dropout_backward(dseq.transpose(0, 2, 1), cache["drop_conv"])
    for i in reversed(range(len(cfg.conv_channels))):
        dh = L.relu_backward(dh, cache[f"relu{i}"])
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = L.conv1d_backward(dh, cache[f"conv{i}"])

    ordered = {name: grads[name] for name in params.arrays}
    if return_input_grad:
        return ordered, dh.reshape(b, n_nodes, length)
    return ordered


def predict(params: ModelParams, x, graph, batch_size=256) -> np.ndarray:
    """Inference-mode probabilities, evaluated in chunks."""
    x = np.asarray(x)
    out = [forward(params, x[i:i + batch_size], graph).probs
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out)
