"""Known-vs-unknown separability metrics and open-set classification scores.

Scores follow the convention "higher = more likely known"; acceptance is
always ``score >= threshold``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .scoring import fit_threshold

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _pair(known, unknown):
    k = np.asarray(known, dtype=float).ravel()
    u = np.asarray(unknown, dtype=float).ravel()
    if k.size == 0 or u.size == 0:
        raise ValueError("both known and unknown score lists must be nonempty")
    return k, u


def auroc(known, unknown) -> float:
    """Mann-Whitney statistic P(known > unknown) + 0.5 P(tie)."""
    k, u = _pair(known, unknown)
    u = np.sort(u)
    below = np.searchsorted(u, k, side="left")
    at_or_below = np.searchsorted(u, k, side="right")
    return float((below.sum() + 0.5 * (at_or_below - below).sum()) / (k.size * u.size))


def dtacc(known, unknown) -> float:
    """Best balanced accuracy 0.5 (TPR + TNR) over all thresholds."""
    k, u = _pair(known, unknown)
    values = np.unique(np.concatenate([k, u]))
    cuts = np.concatenate([[-np.inf], (values[:-1] + values[1:]) / 2, [np.inf]])
    ks, us = np.sort(k), np.sort(u)
    tp = k.size - np.searchsorted(ks, cuts, side="left")
    tn = np.searchsorted(us, cuts, side="left")
    # integer numerator so the result is rounded once
    return float(np.max(tp * u.size + tn * k.size) / (2 * k.size * u.size))


def aupr(known, unknown, positive: str = "in") -> float:
    """Step-wise area under the precision-recall curve.

    ``positive='in'`` treats known samples as positives; ``'out'`` treats
    unknowns as positives and negates scores. Precision is taken at each
    distinct threshold and weighted by the recall gained there.
    """
    k, u = _pair(known, unknown)
    if positive == "in":
        pos, neg = k, u
    elif positive == "out":
        pos, neg = -u, -k
    else:
        raise ValueError(f"positive must be 'in' or 'out', got {positive!r}")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    # last index of each group of tied scores
    ends = np.flatnonzero(np.diff(scores, append=-np.inf) != 0)
    tp = np.cumsum(labels)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / pos.size
    gains = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(gains * precision))


def tnr_at_tpr(known, unknown, tpr: float = 0.95) -> float:
    k, u = _pair(known, unknown)
    delta = fit_threshold(k, tpr)
    return float(np.mean(u < delta))


@dataclass
class ScoredSample:
    score: float
    is_known: bool
    true_label: int  # class index, or num_classes for unknown
    predicted_label: int


def macro_f1_open(true_labels, predicted_labels, scores, threshold: float, num_classes: int) -> float:
    """Unweighted mean F1 over the m known classes plus the unknown class.

    ``true_labels`` uses ``num_classes`` for unknown samples. A sample is
    assigned its predicted label when its score reaches ``threshold``,
    otherwise the unknown label.
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    y = np.asarray(true_labels, dtype=int)
    pred = np.where(np.asarray(scores, dtype=float) >= threshold, np.asarray(predicted_labels, dtype=int), num_classes)
    f1s = []
    for c in range(num_classes + 1):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def macro_f1_samples(samples: Sequence[ScoredSample], threshold: float, num_classes: int) -> float:
    return macro_f1_open([s.true_label for s in samples], [s.predicted_label for s in samples],
                         [s.score for s in samples], threshold, num_classes)


def oscr(known_scores, known_correct, unknown_scores) -> float:
    """Area under the correct-classification-rate vs false-positive-rate curve."""
    ks = np.asarray(known_scores, dtype=float)
    correct = np.asarray(known_correct, dtype=bool)
    us = np.asarray(unknown_scores, dtype=float)
    if ks.size == 0 or us.size == 0:
        raise ValueError("OSCR needs both known and unknown samples")
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([ks, us]))[::-1]])
    ks_sorted_correct = np.sort(ks[correct])
    us_sorted = np.sort(us)
    ccr = (correct.sum() - np.searchsorted(ks_sorted_correct, thresholds, side="left")) / ks.size
    fpr = (us.size - np.searchsorted(us_sorted, thresholds, side="left")) / us.size
    return float(_trapezoid(ccr, fpr))


def oscr_samples(samples: Sequence[ScoredSample]) -> float:
    known = [s for s in samples if s.is_known]
    unknown = [s for s in samples if not s.is_known]
    return oscr([s.score for s in known], [s.predicted_label == s.true_label for s in known],
                [s.score for s in unknown])


def openness(n_train: int, n_test: int, n_target: int) -> float:
    if min(n_train, n_test, n_target) <= 0:
        raise ValueError("class counts must be positive")
    if n_test < n_train:
        raise ValueError("n_test must be >= n_train")
    return 1.0 - math.sqrt(2 * n_train / (n_test + n_target))


@dataclass
class EvalReport:
    closed_accuracy: float
    auroc: Optional[float] = None
    dtacc: Optional[float] = None
    auin: Optional[float] = None
    auout: Optional[float] = None
    tnr_at_tpr95: Optional[float] = None
    macro_f1: Optional[float] = None
    oscr: Optional[float] = None
    openness: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        rows = []
        for key, value in self.to_dict().items():
            rows.append(f"{key:16s} {'absent' if value is None else f'{value:.4f}'}")
        return "\n".join(rows)


def evaluate(known_scores, known_true, known_pred, unknown_scores, unknown_pred,
             threshold: float, num_classes: int, n_test_classes: Optional[int] = None) -> EvalReport:
    """Full metric block; metrics needing unknown samples stay ``None`` without them."""
    known_scores = np.asarray(known_scores, dtype=float)
    known_true = np.asarray(known_true, dtype=int)
    known_pred = np.asarray(known_pred, dtype=int)
    unknown_scores = np.asarray(unknown_scores, dtype=float)
    report = EvalReport(closed_accuracy=float(np.mean(known_pred == known_true)))
    true_all = np.concatenate([known_true, np.full(unknown_scores.size, num_classes)])
    pred_all = np.concatenate([known_pred, np.asarray(unknown_pred, dtype=int)])
    scores_all = np.concatenate([known_scores, unknown_scores])
    report.macro_f1 = macro_f1_open(true_all, pred_all, scores_all, threshold, num_classes)
    if n_test_classes is not None:
        report.openness = openness(num_classes, n_test_classes, num_classes)
    if unknown_scores.size:
        report.auroc = auroc(known_scores, unknown_scores)
        report.dtacc = dtacc(known_scores, unknown_scores)
        report.auin = aupr(known_scores, unknown_scores, "in")
        report.auout = aupr(known_scores, unknown_scores, "out")
        report.tnr_at_tpr95 = tnr_at_tpr(known_scores, unknown_scores, 0.95)
        report.oscr = oscr(known_scores, known_pred == known_true, unknown_scores)
    return report
