"""Binary cross-entropy on clipped probabilities."""
import numpy as np

CLIP_EPS = 1e-7


def _check(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"prediction shape {yhat.shape} != label shape {y.shape}")
    if yhat.size == 0:
        raise ValueError("BCE of an empty batch is undefined")
    return yhat, y


def bce_loss(yhat, y, eps=CLIP_EPS):
    """Mean binary cross-entropy with predictions clipped to [eps, 1 - eps]."""
    yhat, y = _check(yhat, y)
    p = np.clip(yhat, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_grad(yhat, y, wrt="prob", n=None, eps=CLIP_EPS):
    """Gradient of the mean BCE.

    ``wrt="prob"`` differentiates w.r.t. the probabilities,
    ``wrt="logit"`` w.r.t. pre-sigmoid logits (``yhat`` must then be the
    sigmoid output). Entries clipped away have zero gradient. ``n`` overrides
    the averaging count, for gradients accumulated over sub-batches.
    """
    yhat, y = _check(yhat, y)
    n = yhat.size if n is None else n
    inside = (yhat > eps) & (yhat < 1.0 - eps)
    if wrt == "prob":
        p = np.clip(yhat, eps, 1.0 - eps)
        g = (p - y) / (p * (1.0 - p))
    elif wrt == "logit":
        g = yhat - y
    else:
        raise ValueError("wrt must be 'prob' or 'logit'")
    return np.where(inside, g, 0.0) / n
