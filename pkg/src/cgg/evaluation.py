"""Classification metrics, ROC/AUC and attention-based sensor importance.

The positive class is PD (label 1) throughout; a score counts as a PD
prediction when it is >= the threshold (0.5 by default).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .neuralcore.model import forward, predict
from .preprocess import stack_samples


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_rows(self):
        """Rows are actual class (CO, PD), columns predicted class (CO, PD)."""
        return [[self.tn, self.fp], [self.fn, self.tp]]


@dataclass(frozen=True)
class Scores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple = ()


def confusion(scores, labels, threshold=0.5) -> ConfusionMatrix:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0] if scores.ndim else 0} scores for "
                         f"{labels.shape[0] if labels.ndim else 0} labels")
    if scores.size == 0:
        raise ValueError("confusion matrix of no samples")
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           fn=int(np.sum(~pred & pos)), tn=int(np.sum(~pred & ~pos)))


def metrics(cm: ConfusionMatrix) -> Scores:
    """Accuracy, precision, recall and F1; an empty denominator gives 0 and a flag."""
    if cm.n == 0:
        raise ValueError("metrics of an empty confusion matrix")
    flags = []
    accuracy = (cm.tp + cm.tn) / cm.n
    if cm.tp + cm.fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = cm.tp / (cm.tp + cm.fp)
    if cm.tp + cm.fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = cm.tp / (cm.tp + cm.fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return Scores(accuracy, precision, recall, f1, tuple(flags))


def roc_auc(scores, labels):
    """ROC points from one threshold per distinct score, and trapezoidal AUC.

    Tied scores move the curve diagonally, which gives ties half credit.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(y == 1)[ends]
    fps = np.cumsum(y == 0)[ends]
    tps = np.r_[0, tps]
    fps = np.r_[0, fps]
    # integer trapezoid sum, normalised once
    area2 = np.sum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1]))
    auc = float(area2) / (2.0 * n_pos * n_neg)
    points = [(f / n_neg, t / n_pos) for f, t in zip(fps.tolist(), tps.tolist())]
    return points, auc


@dataclass
class MetricsReport:
    n: int
    threshold: float
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    roc: list
    flags: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def report_from_scores(scores, labels, threshold=0.5) -> MetricsReport:
    cm = confusion(scores, labels, threshold)
    sc = metrics(cm)
    flags = list(sc.flags)
    try:
        roc, auc = roc_auc(scores, labels)
    except ValueError:
        roc, auc = [], None
        flags.append("auc_undefined")
    return MetricsReport(n=cm.n, threshold=threshold, confusion=cm, accuracy=sc.accuracy,
                         precision=sc.precision, recall=sc.recall, f1=sc.f1, auc=auc,
                         roc=roc, flags=flags)


def evaluate(params, samples, graph, threshold=0.5, batch_size=256) -> MetricsReport:
    if not samples:
        raise ValueError("nothing to evaluate")
    x, y = stack_samples(samples)
    return report_from_scores(predict(params, x, graph, batch_size), y, threshold)


# ---------------------------------------------------------------- node importance

# cool -> warm anchors (position, RGB); colours are linearly interpolated
WARM_COLORMAP = (
    (0.00, (49, 54, 149)),
    (0.25, (116, 173, 209)),
    (0.50, (255, 255, 191)),
    (0.75, (244, 109, 67)),
    (1.00, (165, 0, 38)),
)


def colormap(value) -> str:
    """Hex colour for an importance in [0, 1]; warmer means more important."""
    v = float(np.clip(value, 0.0, 1.0))
    for (p0, c0), (p1, c1) in zip(WARM_COLORMAP, WARM_COLORMAP[1:]):
        if v <= p1:
            w = (v - p0) / (p1 - p0)
            rgb = [round(a + w * (b - a)) for a, b in zip(c0, c1)]
            return "#{:02x}{:02x}{:02x}".format(*rgb)
    return "#{:02x}{:02x}{:02x}".format(*WARM_COLORMAP[-1][1])


def scale_importance(norms) -> np.ndarray:
    norms = np.asarray(norms, dtype=float)
    lo, hi = norms.min(), norms.max()
    if hi == lo:
        return np.full_like(norms, 0.5)
    return (norms - lo) / (hi - lo)


@dataclass
class NodeImportance:
    subject_id: str
    cycle_index: int
    importance: list
    attention_mass: list
    color: list
    label: Optional[int] = None
    severity: Optional[float] = None
    embeddings: Optional[list] = None

    def to_dict(self, with_embeddings=False):
        d = asdict(self)
        if not with_embeddings:
            d.pop("embeddings")
        return d


def importance_from_outputs(embeddings, alpha):
    """(scaled L2 importance, attention mass) for one graph.

    embeddings: final GAT node states [n, d]; alpha: final attention [n, n]
    with rows summing to one, so mass_i = sum_j alpha[j, i] totals n.
    """
    norms = np.linalg.norm(embeddings, axis=1)
    return scale_importance(norms), alpha.sum(axis=0)


def node_importance(params, samples, graph, with_embeddings=False) -> list:
    """Per-node importance from the final GAT layer for each sample."""
    x, _ = stack_samples(samples)
    res = forward(params, x, graph)
    out = []
    for k, s in enumerate(samples):
        emb = res.node_embeddings[k]
        imp, mass = importance_from_outputs(emb, res.attention[-1][k])
        out.append(NodeImportance(
            subject_id=s.subject_id, cycle_index=s.cycle_index,
            importance=imp.tolist(), attention_mass=mass.tolist(),
            color=[colormap(v) for v in imp], label=s.label, severity=s.severity,
            embeddings=emb.tolist() if with_embeddings else None,
        ))
    return out


def group_importance(items) -> dict:
    """Mean importance per node grouped by (label, severity), for heatmap-style summaries."""
    groups = {}
    for it in items:
        key = f"label={it.label}|severity={it.severity}"
        groups.setdefault(key, []).append(it.importance)
    return {k: {"n": len(v), "mean_importance": np.mean(v, axis=0).tolist()}
            for k, v in sorted(groups.items())}
