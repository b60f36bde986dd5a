"""Finite-difference verification of every analytic backward pass.

Each check builds a tiny random problem, reduces the layer output to a
scalar through a fixed random projection, and compares the analytic
gradient of every parameter and input against central differences.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .loss import bce_grad, bce_loss
from .model import ModelConfig, backward, forward, init_params

STEP = 1e-5
TOLERANCE = 1e-4
# Central differences carry roundoff of about eps * |loss| / STEP ~ 1e-11, so
# entries below this magnitude are compared on an absolute scale instead.
ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    layer: str
    seed: int
    max_rel_err: float
    n_checked: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d


def rel_error(analytic, numeric, floor=ABS_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g


def _compare(layer, seed, f, variables, analytic):
    worst, where, count = 0.0, "", 0
    for name, arr in variables.items():
        err = rel_error(analytic[name], numeric_grad(f, arr))
        count += err.size
        if err.size and err.max() > worst:
            worst, where = float(err.max()), name
    return GradCheckReport(layer, seed, worst, count, where)


def _toy_mask(n):
    # path graph plus one chord; always connected
    mask = np.eye(n, dtype=bool)
    for i in range(n - 1):
        mask[i, i + 1] = mask[i + 1, i] = True
    if n > 3:
        mask[0, n - 1] = mask[n - 1, 0] = True
    return mask


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 2, 9)), rng.normal(size=(3, 2, 3)), rng.normal(size=3)
    proj = rng.normal(size=(2, 3, 7))
    f = lambda: float((L.conv1d_forward(x, w, b)[0] * proj).sum())
    _, cache = L.conv1d_forward(x, w, b)
    dx, dw, db = L.conv1d_backward(proj, cache)
    return _compare("conv1d", seed, f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def _gru_params(rng, d, h):
    return {**{k: rng.normal(scale=0.6, size=(h, h + d)) for k in ("W_z", "W_r", "W_h")},
            **{k: rng.normal(scale=0.3, size=h) for k in ("b_z", "b_r", "b_h")}}


def _check_gru(layer, seed, steps):
    rng = np.random.default_rng(seed)
    d, h = 3, 5
    p = _gru_params(rng, d, h)
    x = rng.normal(size=(2, steps, d))
    h0 = rng.uniform(-1, 1, size=(2, h))
    proj = rng.normal(size=(2, steps, h))
    f = lambda: float((L.gru_sequence_forward(x, p, h0)[0] * proj).sum())
    _, cache = L.gru_sequence_forward(x, p, h0)
    dx, dh0, grads = L.gru_sequence_backward(proj, cache)
    return _compare(layer, seed, f, {"x": x, "h0": h0, **p}, {"x": dx, "h0": dh0, **grads})


def check_gru_step(seed):
    return _check_gru("gru_step", seed, steps=1)


def check_gru_sequence(seed):
    return _check_gru("gru_sequence", seed, steps=7)


def check_gat(seed):
    rng = np.random.default_rng(seed)
    n, d_in, d_out = 4, 5, 4
    h = rng.normal(size=(2, n, d_in))
    w = rng.normal(scale=0.5, size=(d_out, d_in))
    a = rng.normal(size=2 * d_out)
    mask = _toy_mask(n)
    proj = rng.normal(size=(2, n, d_out))
    f = lambda: float((L.gat_forward(h, w, a, mask)[0] * proj).sum())
    _, _, cache = L.gat_forward(h, w, a, mask)
    dh, dw, da = L.gat_backward(proj, cache)
    return _compare("gat", seed, f, {"h": h, "W": w, "a": a}, {"h": dh, "W": dw, "a": da})


def check_mean_pool(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(2, 3, 4))
    proj = rng.normal(size=(2, 4))
    f = lambda: float((L.mean_pool_forward(h)[0] * proj).sum())
    _, shape = L.mean_pool_forward(h)
    return _compare("mean_pool", seed, f, {"h": h}, {"h": L.mean_pool_backward(proj, shape)})


def check_dense_sigmoid(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 6)), rng.normal(size=(1, 6)), rng.normal(size=1)
    proj = rng.normal(size=3)
    f = lambda: float((L.dense_sigmoid_forward(x, w, b)[0] * proj).sum())
    probs, _ = L.dense_sigmoid_forward(x, w, b)
    dx, dw, db = L.dense_backward(proj * probs * (1.0 - probs), x, w)
    return _compare("dense_sigmoid", seed, f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def check_bce(seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=6).astype(float)
    p = rng.uniform(0.05, 0.95, size=6)
    logits = rng.normal(size=6)
    f_prob = lambda: bce_loss(p, y)
    f_logit = lambda: bce_loss(L.sigmoid(logits), y)
    r1 = _compare("bce", seed, f_prob, {"prob": p}, {"prob": bce_grad(p, y, wrt="prob")})
    r2 = _compare("bce", seed, f_logit, {"logit": logits},
                  {"logit": bce_grad(L.sigmoid(logits), y, wrt="logit")})
    return max((r1, r2), key=lambda r: r.max_rel_err)


TOY_CONFIG = ModelConfig(n_nodes=4, seq_len=10, kernel_size=3, conv_channels=(2, 3, 2),
                         gru_hidden=4, gat_hidden=5, dropout=0.2)


def check_network(seed, config=TOY_CONFIG):
    """End-to-end check of the mean BCE, dropout active with a fixed mask."""
    from ..preprocess import SensorGraph

    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    for v in params.arrays.values():
        # non-zero biases exercise every bias path
        if v.ndim == 1:
            v[:] = rng.normal(scale=0.1, size=v.shape)
    n = config.n_nodes
    graph = SensorGraph(n, tuple((i, i + 1) for i in range(n - 1)) + ((0, n - 1),))
    x = rng.uniform(0, 1, size=(3, n, config.seq_len))
    y = np.array([0.0, 1.0, 1.0])

    def f():
        res = forward(params, x, graph, training=True, rng=np.random.default_rng(seed + 1000))
        return bce_loss(res.probs, y)

    res = forward(params, x, graph, training=True, rng=np.random.default_rng(seed + 1000))
    grads, dx = backward(params, res, y, return_input_grad=True)
    return _compare("network", seed, f, {"x": x, **params.arrays}, {"x": dx, **grads})


CHECKS = {
    "conv1d": check_conv1d,
    "gru_step": check_gru_step,
    "gru_sequence": check_gru_sequence,
    "gat": check_gat,
    "mean_pool": check_mean_pool,
    "dense_sigmoid": check_dense_sigmoid,
    "bce": check_bce,
    "network": check_network,
}


def grad_check(layer, seed=0) -> GradCheckReport:
    try:
        check = CHECKS[layer]
    except KeyError:
        raise ValueError(f"unknown layer {layer!r}; choose from {sorted(CHECKS)}") from None
    return check(seed)


def run_suite(seeds=range(10), layers=None) -> list:
    return [grad_check(layer, s) for layer in (layers or CHECKS) for s in seeds]


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1)
