"""Detection metrics: AUROC, average precision, F1-max, and pixel variants.

Label convention *inside this module*: 1 = anomalous (the positive class),
matching the ROC literature.  This is the opposite of the sample convention
used by the data pipeline (1 = normal); the evaluation harness flips labels
in exactly one place before calling in here.

All three metrics are computed so that, for integer-weighted inputs, the
result is bit-identical to a brute-force sweep: counts are kept exact and
the precision/recall accumulation runs left to right over descending
thresholds.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError, NumericError

__all__ = ["ScoreSet", "auroc", "average_precision", "f1_max",
           "pixel_metrics"]


class ScoreSet:
    """Scores with binary labels (1 = anomalous) and optional weights."""

    __slots__ = ("scores", "labels", "weights")

    def __init__(self, scores, labels, weights=None):
        self.scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise DataError("scores and labels must have equal length")
        if self.scores.size == 0:
            raise DataError("empty score set")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("non-finite score")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)
        if weights is None:
            self.weights = np.ones(self.scores.shape, dtype=np.float64)
        else:
            self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
            if self.weights.shape != self.scores.shape:
                raise DataError("weights must match scores in length")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
                raise DataError("weights must be positive and finite")

    def __len__(self):
        return self.scores.size

    def positive_weight(self) -> float:
        return float(np.sum(self.weights[self.labels == 1]))

    def negative_weight(self) -> float:
        return float(np.sum(self.weights[self.labels == 0]))


def _grouped(s: ScoreSet):
    """Per unique score (ascending): positive and negative weight in the tie
    group."""
    uniq, inv = np.unique(s.scores, return_inverse=True)
    pos = np.bincount(inv, weights=s.weights * s.labels,
                      minlength=uniq.size)
    neg = np.bincount(inv, weights=s.weights * (1 - s.labels),
                      minlength=uniq.size)
    return uniq, pos, neg


def auroc(s: ScoreSet) -> float:
    """Probability a random anomalous score exceeds a random normal one;
    ties count half.  Rank-based (midrank ties), exact for integer weights."""
    total_pos = s.positive_weight()
    total_neg = s.negative_weight()
    if total_pos == 0 or total_neg == 0:
        raise DataError("auroc needs both classes present")
    _, pos, neg = _grouped(s)
    # negatives strictly below each tie group, plus half the tied ones
    below = np.concatenate(([0.0], np.cumsum(neg)[:-1]))
    wins = float(np.sum(pos * (below + 0.5 * neg)))
    return wins / (total_pos * total_neg)


def average_precision(s: ScoreSet) -> float:
    """Step-interpolated area under precision-recall,
    sum of (R_k - R_{k-1}) * P_k over descending score thresholds."""
    total_pos = s.positive_weight()
    if total_pos == 0:
        raise DataError("average_precision needs a positive sample")
    _, pos, neg = _grouped(s)
    ap = 0.0
    prev_recall = 0.0
    tp = 0.0
    fp = 0.0
    for k in range(pos.size - 1, -1, -1):  # descending thresholds
        tp += pos[k]
        fp += neg[k]
        precision = tp / (tp + fp)
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def f1_max(s: ScoreSet) -> float:
    """Maximum F1 over thresholds "anomalous iff score >= t", t ranging over
    the observed scores plus +inf."""
    total_pos = s.positive_weight()
    if total_pos == 0:
        raise DataError("f1_max needs a positive sample")
    _, pos, neg = _grouped(s)
    best = 0.0  # the +inf threshold: tp = fp = 0 -> F1 = 0
    tp = 0.0
    fp = 0.0
    for k in range(pos.size - 1, -1, -1):
        tp += pos[k]
        fp += neg[k]
        fn = total_pos - tp
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        if f1 > best:
            best = f1
    return float(best)


def _as_array(x) -> np.ndarray:
    data = getattr(x, "data", x)  # accept autodiff tensors
    return np.asarray(data, dtype=np.float64)


def pixel_metrics(maps, masks) -> dict:
    """Flatten per-sample anomaly maps and ground-truth masks into one score
    set and apply the three image-level metrics to pixels.

    Normal samples contribute all-zero masks; mask pixels must be 0/1.
    """
    if len(maps) != len(masks):
        raise DataError("maps and masks must pair up")
    if len(maps) == 0:
        raise DataError("no maps given")
    flat_scores = []
    flat_labels = []
    for amap, mask in zip(maps, masks):
        a = _as_array(amap)
        m = _as_array(mask)
        if a.shape != m.shape:
            raise DataError(f"map shape {a.shape} != mask shape {m.shape}")
        if not np.all((m == 0) | (m == 1)):
            raise DataError("masks must be binary")
        flat_scores.append(a.reshape(-1))
        flat_labels.append(m.reshape(-1).astype(np.int64))
    s = ScoreSet(np.concatenate(flat_scores), np.concatenate(flat_labels))
    return {
        "pixel_auroc": auroc(s),
        "pixel_ap": average_precision(s),
        "pixel_f1max": f1_max(s),
    }
