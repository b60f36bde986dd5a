"""Differentiable layers of the CNN-GRU-GAT network.

Every layer is a pair of plain functions: ``<layer>_forward`` returns the
output together with a cache, ``<layer>_backward`` takes the upstream
gradient and that cache and returns gradients for the inputs and parameters.
All arrays carry a leading batch axis.

Reductions whose operand order depends on node labelling (softmax
denominators, attention-weighted sums, mean pooling) add their terms in
value-sorted order, so relabelling the nodes of a graph leaves the result
bit-identical.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array shapes do not fit a layer."""


def ordered_sum(x, axis):
    """Sum along ``axis`` after sorting, so the result ignores input order."""
    return np.sort(x, axis=axis).sum(axis=axis)


def sigmoid(x):
    x = np.asarray(x)
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- activations

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def elu_forward(x):
    neg = np.minimum(x, 0.0)
    y = np.where(x > 0, x, np.expm1(neg))
    return y, x


def elu_backward(dy, x):
    return dy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


# ---------------------------------------------------------------- conv1d

def conv1d_forward(x, w, b):
    """Valid cross-correlation ``y[o, i] = sum_c sum_k x[c, i+k] w[o, c, k] + b[o]``.

    x: [N, C_in, L], w: [C_out, C_in, K], b: [C_out] -> y: [N, C_out, L-K+1]
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [N, C_in, L], got shape {x.shape}")
    n, c_in, length = x.shape
    c_out, w_in, k = w.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d kernel expects {w_in} input channels, got {c_in}")
    if length < k:
        raise ShapeError(f"conv1d input length {length} is shorter than kernel {k}")
    l_out = length - k + 1
    cols = sliding_window_view(x, k, axis=2)  # [N, C_in, L_out, K]
    cols = cols.transpose(0, 2, 1, 3).reshape(n, l_out, c_in * k)
    y = cols @ w.reshape(c_out, c_in * k).T + b
    return y.transpose(0, 2, 1), (cols, x.shape, w)


def conv1d_backward(dy, cache):
    cols, x_shape, w = cache
    n, c_in, length = x_shape
    c_out, _, k = w.shape
    l_out = length - k + 1
    dy_t = dy.transpose(0, 2, 1)  # [N, L_out, C_out]
    dw = (dy_t.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(w.shape)
    db = dy_t.sum(axis=(0, 1))
    dcols = (dy_t @ w.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for j in range(k):
        dx[:, :, j:j + l_out] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dx, dw, db


# ---------------------------------------------------------------- GRU

GRU_KEYS = ("W_z", "W_r", "W_h", "b_z", "b_r", "b_h")


def _gru_blocks(p):
    hidden = p["b_z"].shape[0]
    w_hzr = np.concatenate([p["W_z"][:, :hidden], p["W_r"][:, :hidden]])
    w_hh = p["W_h"][:, :hidden]
    w_x = np.concatenate([p["W_z"][:, hidden:], p["W_r"][:, hidden:], p["W_h"][:, hidden:]])
    bias = np.concatenate([p["b_z"], p["b_r"], p["b_h"]])
    return hidden, w_hzr, w_hh, w_x, bias


def _check_gru_shapes(x_dim, h_dim, p):
    hidden = p["b_z"].shape[0]
    for key in ("W_z", "W_r", "W_h"):
        if p[key].shape != (hidden, hidden + x_dim):
            raise ShapeError(
                f"GRU {key} has shape {p[key].shape}, expected {(hidden, hidden + x_dim)}")
    if h_dim != hidden:
        raise ShapeError(f"GRU hidden state has size {h_dim}, expected {hidden}")


def gru_step(x_t, h_prev, p):
    """One GRU update on ``[h_prev, x_t]``; accepts single vectors or batches."""
    x_t = np.asarray(x_t)
    h_prev = np.asarray(h_prev)
    _check_gru_shapes(x_t.shape[-1], h_prev.shape[-1], p)
    hx = np.concatenate([h_prev, x_t], axis=-1)
    z = sigmoid(hx @ p["W_z"].T + p["b_z"])
    r = sigmoid(hx @ p["W_r"].T + p["b_r"])
    rhx = np.concatenate([r * h_prev, x_t], axis=-1)
    c = np.tanh(rhx @ p["W_h"].T + p["b_h"])
    return (1.0 - z) * h_prev + z * c


def gru_sequence_forward(x, p, h0=None):
    """Run one GRU layer over ``x`` [N, T, D]; returns all hidden states [N, T, H]."""
    if x.ndim != 3 or x.shape[1] == 0:
        raise ShapeError(f"GRU expects a non-empty [N, T, D] sequence, got shape {x.shape}")
    n, steps, d = x.shape
    hidden = p["b_z"].shape[0]
    _check_gru_shapes(d, hidden, p)
    _, w_hzr, w_hh, w_x, bias = _gru_blocks(p)

    xproj = (x.reshape(-1, d) @ w_x.T + bias).reshape(n, steps, 3 * hidden)
    h = np.zeros((n, hidden), dtype=x.dtype) if h0 is None else h0
    hs = np.empty((n, steps, hidden), dtype=x.dtype)
    prev = np.empty_like(hs)
    zs = np.empty_like(hs)
    rs = np.empty_like(hs)
    cs = np.empty_like(hs)
    for t in range(steps):
        zr = sigmoid(xproj[:, t, :2 * hidden] + h @ w_hzr.T)
        z, r = zr[:, :hidden], zr[:, hidden:]
        c = np.tanh(xproj[:, t, 2 * hidden:] + (r * h) @ w_hh.T)
        prev[:, t] = h
        h = (1.0 - z) * h + z * c
        hs[:, t], zs[:, t], rs[:, t], cs[:, t] = h, z, r, c
    return hs, (x, prev, zs, rs, cs, p)


def gru_sequence_backward(dhs, cache):
    """Backpropagation through time. ``dhs`` is the gradient w.r.t. every output state."""
    x, prev, zs, rs, cs, p = cache
    n, steps, d = x.shape
    hidden, w_hzr, w_hh, w_x, _ = _gru_blocks(p)

    dxproj = np.empty((n, steps, 3 * hidden), dtype=dhs.dtype)
    dw_hzr = np.zeros_like(w_hzr)
    dw_hh = np.zeros_like(w_hh)
    dh = np.zeros((n, hidden), dtype=dhs.dtype)
    for t in reversed(range(steps)):
        dh = dh + dhs[:, t]
        hp, z, r, c = prev[:, t], zs[:, t], rs[:, t], cs[:, t]
        da_c = dh * z * (1.0 - c * c)
        dz = dh * (c - hp)
        dh_prev = dh * (1.0 - z)
        rh = r * hp
        drh = da_c @ w_hh
        dh_prev += drh * r
        da_zr = np.concatenate([dz * z * (1.0 - z), drh * hp * r * (1.0 - r)], axis=1)
        dh_prev += da_zr @ w_hzr
        dxproj[:, t, :2 * hidden] = da_zr
        dxproj[:, t, 2 * hidden:] = da_c
        dw_hzr += da_zr.T @ hp
        dw_hh += da_c.T @ rh
        dh = dh_prev

    flat = dxproj.reshape(-1, 3 * hidden)
    dw_x = flat.T @ x.reshape(-1, d)
    db = flat.sum(axis=0)
    dx = (flat @ w_x).reshape(n, steps, d)
    grads = {
        "W_z": np.concatenate([dw_hzr[:hidden], dw_x[:hidden]], axis=1),
        "W_r": np.concatenate([dw_hzr[hidden:], dw_x[hidden:2 * hidden]], axis=1),
        "W_h": np.concatenate([dw_hh, dw_x[2 * hidden:]], axis=1),
        "b_z": db[:hidden],
        "b_r": db[hidden:2 * hidden],
        "b_h": db[2 * hidden:],
    }
    return dx, dh, grads


# ---------------------------------------------------------------- GAT

def gat_forward(h, w, a, mask, slope=0.2):
    """Single-head graph attention convolution with ELU output.

    h: [B, n, d_in], w: [d_out, d_in], a: [2*d_out], mask: [n, n] bool with
    ``mask[i, j]`` true when node i attends to node j (self-loops included).
    Returns (h_out [B, n, d_out], alpha [B, n, n], cache).
    """
    if h.ndim != 3:
        raise ShapeError(f"GAT expects [B, n, d], got shape {h.shape}")
    b, n, d_in = h.shape
    d_out = w.shape[0]
    if w.shape[1] != d_in:
        raise ShapeError(f"GAT weight expects {w.shape[1]} input features, got {d_in}")
    if a.shape != (2 * d_out,):
        raise ShapeError(f"GAT attention vector has shape {a.shape}, expected {(2 * d_out,)}")
    if mask.shape != (n, n):
        raise ShapeError(f"adjacency mask {mask.shape} does not match {n} nodes")
    if not mask.any(axis=1).all():
        raise RuntimeError("GAT node with empty neighbourhood")

    wh = (h.reshape(-1, d_in) @ w.T).reshape(b, n, d_out)
    s_dst = (wh * a[:d_out]).sum(axis=-1)
    s_src = (wh * a[d_out:]).sum(axis=-1)
    pre = s_dst[:, :, None] + s_src[:, None, :]
    e = leaky_relu(pre, slope)
    e = np.where(mask, e, -np.inf)
    ex = np.exp(e - e.max(axis=2, keepdims=True))
    alpha = ex / ordered_sum(ex, axis=2)[:, :, None]
    # terms[b, i, f, j] = alpha[b, i, j] * wh[b, j, f]
    terms = alpha[:, :, None, :] * wh.transpose(0, 2, 1)[:, None, :, :]
    agg = ordered_sum(terms, axis=3)
    out, elu_cache = elu_forward(agg)
    return out, alpha, (h, w, a, mask, slope, wh, pre, alpha, elu_cache)


def gat_backward(dout, cache):
    h, w, a, mask, slope, wh, pre, alpha, elu_cache = cache
    b, n, d_in = h.shape
    d_out = w.shape[0]
    dagg = elu_backward(dout, elu_cache)
    dalpha = dagg @ wh.transpose(0, 2, 1)
    dwh = alpha.transpose(0, 2, 1) @ dagg
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=2, keepdims=True))
    dpre = np.where(mask, de * np.where(pre > 0, 1.0, slope), 0.0)
    ds_dst = dpre.sum(axis=2)
    ds_src = dpre.sum(axis=1)
    dwh += ds_dst[:, :, None] * a[:d_out] + ds_src[:, :, None] * a[d_out:]
    da = np.concatenate([
        (ds_dst[:, :, None] * wh).sum(axis=(0, 1)),
        (ds_src[:, :, None] * wh).sum(axis=(0, 1)),
    ])
    flat = dwh.reshape(-1, d_out)
    dw = flat.T @ h.reshape(-1, d_in)
    dh = (flat @ w).reshape(b, n, d_in)
    return dh, dw, da


# ---------------------------------------------------------------- pooling, head, dropout

def mean_pool_forward(h):
    """Mean over the node axis of [B, n, d]."""
    return ordered_sum(h, axis=1) / h.shape[1], h.shape


def mean_pool_backward(dy, shape):
    return np.broadcast_to(dy[:, None, :] / shape[1], shape).copy()


def dense_sigmoid_forward(x, w, b):
    """x: [B, d], w: [1, d], b: [1] -> (probabilities [B], logits [B])."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense head expects {w.shape[1]} features, got {x.shape[-1]}")
    logits = (x * w[0]).sum(axis=-1) + b[0]
    return sigmoid(logits), logits


def dense_backward(dlogits, x, w):
    """Gradients of the affine head given d(loss)/d(logit)."""
    dw = (dlogits @ x)[None, :]
    db = np.array([dlogits.sum()], dtype=dlogits.dtype)
    dx = dlogits[:, None] * w[0]
    return dx, dw, db


def dropout_forward(x, p, rng=None, training=False):
    """Inverted dropout; identity at inference or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask
