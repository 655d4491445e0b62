"""Classification and agreement metrics.

Every ratio with a zero denominator evaluates to 0.0 rather than NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .errors import (
    DegenerateMarginals,
    EmptyInput,
    LengthMismatch,
    ShapeMismatch,
    TooFewPairs,
    UnknownClass,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # counts[i, j]: truth classes[i], predicted classes[j]

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        k = len(self.classes)
        if c.shape != (k, k):
            raise ShapeMismatch(f"counts shape {c.shape} does not match {k} classes")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def index(self, cls) -> int:
        try:
            return self.classes.index(cls)
        except ValueError:
            raise UnknownClass(f"class {cls!r} not in {self.classes}") from None


def confusion(truth: Sequence[Hashable], pred: Sequence[Hashable], classes=None) -> ConfusionMatrix:
    """Tabulate truth vs prediction.

    Class order is first appearance in ``truth`` then ``pred`` unless ``classes`` is given.
    """
    truth = list(truth)
    pred = list(pred)
    if len(truth) != len(pred):
        raise LengthMismatch(f"{len(truth)} truth labels vs {len(pred)} predictions")
    if not truth:
        raise EmptyInput("nothing to score")
    if classes is None:
        classes = list(dict.fromkeys(truth + pred))
    else:
        classes = list(classes)
        unknown = set(truth + pred) - set(classes)
        if unknown:
            raise UnknownClass(f"labels {sorted(map(str, unknown))} not in class list")
    pos = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    flat = np.fromiter((pos[t] * k + pos[p] for t, p in zip(truth, pred)), dtype=np.int64,
                       count=len(truth))
    counts = np.bincount(flat, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(tuple(classes), counts)


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def fbeta(cm: ConfusionMatrix, cls, beta: float = 1.0) -> tuple[float, float, float]:
    i = cm.index(cls)
    tp = int(cm.counts[i, i])
    fp = int(cm.counts[:, i].sum()) - tp
    fn = int(cm.counts[i, :].sum()) - tp
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    b2 = beta * beta
    f = _ratio((1.0 + b2) * p * r, b2 * p + r)
    return p, r, f


def _require(cm: ConfusionMatrix):
    if cm.total == 0:
        raise EmptyInput("confusion matrix is empty")


def per_class(cm: ConfusionMatrix) -> dict:
    """precision, recall, f1, f2 and support for each class."""
    _require(cm)
    out = {}
    for i, c in enumerate(cm.classes):
        p, r, f1 = fbeta(cm, c, 1.0)
        f2 = fbeta(cm, c, 2.0)[2]
        out[c] = {"precision": p, "recall": r, "f1": f1, "f2": f2,
                  "support": int(cm.counts[i].sum())}
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    _require(cm)
    return float(np.mean([fbeta(cm, c, 1.0)[2] for c in cm.classes]))


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes that occur in the truth."""
    _require(cm)
    recalls = [fbeta(cm, c)[1] for i, c in enumerate(cm.classes) if cm.counts[i].sum() > 0]
    return float(np.mean(recalls))


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation (R_K); 0.0 when either marginal is constant."""
    _require(cm)
    counts = cm.counts.astype(object)  # exact integer arithmetic
    c = int(np.trace(cm.counts))
    s = cm.total
    p = [int(v) for v in counts.sum(axis=0)]
    t = [int(v) for v in counts.sum(axis=1)]
    num = c * s - sum(pk * tk for pk, tk in zip(p, t))
    den_p = s * s - sum(pk * pk for pk in p)
    den_t = s * s - sum(tk * tk for tk in t)
    if den_p == 0 or den_t == 0:
        return 0.0
    return num / (math.sqrt(den_p) * math.sqrt(den_t))


def report(cm: ConfusionMatrix) -> dict:
    return {
        "macro_f1": macro_f1(cm),
        "balanced_accuracy": balanced_accuracy(cm),
        "mcc": mcc(cm),
        "per_class": per_class(cm),
        "n": cm.total,
    }


def format_report(rep: dict) -> str:
    """Aligned table followed by ``key=value`` lines."""
    lines = [f"{'class':<12}{'precision':>10}{'recall':>10}{'f1':>10}{'f2':>10}{'support':>9}"]
    for c, row in rep["per_class"].items():
        lines.append(f"{str(c):<12}{row['precision']:>10.3f}{row['recall']:>10.3f}"
                     f"{row['f1']:>10.3f}{row['f2']:>10.3f}{row['support']:>9d}")
    lines.append("")
    for key in ("n", "macro_f1", "balanced_accuracy", "mcc"):
        lines.append(f"{key}={rep[key]!r}")
    for c, row in rep["per_class"].items():
        for k in ("precision", "recall", "f1", "f2"):
            lines.append(f"{c}.{k}={row[k]!r}")
    return "\n".join(lines) + "\n"


# -- rater agreement ---------------------------------------------------------------

SCORE_LEVELS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ScorePair:
    expert: int
    model: int

    def __post_init__(self):
        for name in ("expert", "model"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v not in SCORE_LEVELS:
                raise ValueError(f"{name} score must be an integer in 1..5, got {v!r}")
            object.__setattr__(self, name, int(v))


def quadratic_weighted_kappa(pairs: Sequence) -> float:
    """Cohen's kappa with weights ``(i - j)^2 / 16`` on the fixed 1..5 scale."""
    pairs = [p if isinstance(p, ScorePair) else ScorePair(*p) for p in pairs]
    if len(pairs) < 2:
        raise TooFewPairs(f"need at least 2 score pairs, got {len(pairs)}")
    k = len(SCORE_LEVELS)
    obs = np.zeros((k, k))
    for p in pairs:
        obs[p.expert - 1, p.model - 1] += 1
    n = obs.sum()
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / n
    lv = np.arange(k)
    w = (lv[:, None] - lv[None, :]) ** 2 / (k - 1) ** 2
    den = float((w * expected).sum())
    if den == 0.0:
        raise DegenerateMarginals("expected disagreement is zero; kappa undefined")
    return 1.0 - float((w * obs).sum()) / den


# -- grid scoring --------------------------------------------------------------------

def matrix_score(truth, pred) -> tuple[float, float]:
    """Binary F1 (active cells positive) and cellwise accuracy."""
    t = np.asarray(getattr(truth, "matrix", truth)).astype(bool)
    p = np.asarray(getattr(pred, "matrix", pred)).astype(bool)
    if t.shape != p.shape:
        raise ShapeMismatch(f"grid shapes differ: {t.shape} vs {p.shape}")
    tp = int((t & p).sum())
    fp = int((~t & p).sum())
    fn = int((t & ~p).sum())
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = _ratio(2 * prec * rec, prec + rec)
    acc = float((t == p).mean())
    return f1, acc
