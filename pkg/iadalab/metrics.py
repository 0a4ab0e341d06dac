"""Evaluation metrics: accuracy, precision, recall, F1, AUC and seed aggregates."""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "auc", "f1", "precision", "recall", "macro_f1")


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""


@dataclass
class MetricRow:
    accuracy: float
    auc: float
    f1: float
    precision: float
    recall: float
    macro_f1: float
    support: tuple = field(default=())

    def as_dict(self):
        row = asdict(self)
        row.pop("support")
        return row


def _check_pair(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise MetricError(f"length mismatch: {pred.shape[0] if pred.ndim else 0} predictions "
                          f"for {true.shape[0] if true.ndim else 0} labels")
    if true.size == 0:
        raise MetricError("no samples to evaluate")
    return pred, true


def _safe_ratio(num, den):
    return float(num) / float(den) if den > 0 else 0.0


def confusion_metrics(pred, true, positive_class=1):
    """Accuracy, precision, recall and F1 for one positive class.

    Undefined ratios (zero denominators) are reported as 0.

    Returns:
        tuple[float, float, float, float]: (accuracy, precision, recall, f1).
    """
    pred, true = _check_pair(pred, true)
    tp = int(np.sum((pred == positive_class) & (true == positive_class)))
    fp = int(np.sum((pred == positive_class) & (true != positive_class)))
    fn = int(np.sum((pred != positive_class) & (true == positive_class)))
    accuracy = float(np.mean(pred == true))
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return accuracy, precision, recall, f1


def macro_f1(pred, true, n_classes):
    """Unweighted mean of the per-class F1 scores (balanced F1)."""
    pred, true = _check_pair(pred, true)
    return float(np.mean([confusion_metrics(pred, true, c)[3] for c in range(1, n_classes + 1)]))


def auc_roc(scores, labels, positive_class=1):
    """Area under the ROC curve as the Mann-Whitney statistic.

    ``P(score+ > score-) + P(tie) / 2``, computed from average ranks so tied
    scores count half.

    Raises:
        MetricError: If only one class is present.
    """
    scores, labels = _check_pair(scores, labels)
    positive = labels == positive_class
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def auc_macro_ovr(probs, labels, n_classes):
    """Macro one-vs-rest AUC over the classes present on both sides."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    values = []
    for c in range(1, n_classes + 1):
        present = labels == c
        if present.all() or not present.any():
            continue
        values.append(auc_roc(probs[:, c - 1], labels, positive_class=c))
    if not values:
        raise MetricError("AUC is undefined when only one class is present")
    return float(np.mean(values))


def metric_row(pred, true, probs, n_classes, positive_class=1):
    """All reported metrics for one split.

    Binary tasks score AUC on the positive class's probability; more classes
    use the macro one-vs-rest average. An undefined AUC is recorded as NaN.
    """
    pred, true = _check_pair(pred, true)
    accuracy, precision, recall, f1 = confusion_metrics(pred, true, positive_class)
    probs = np.asarray(probs, dtype=np.float64)
    try:
        if n_classes == 2:
            auc = auc_roc(probs[:, positive_class - 1], true, positive_class)
        else:
            auc = auc_macro_ovr(probs, true, n_classes)
    except MetricError as e:
        logger.warning(f"AUC not available: {e}")
        auc = float("nan")
    support = tuple(int(np.sum(true == c)) for c in range(1, n_classes + 1))
    return MetricRow(accuracy=accuracy, auc=auc, f1=f1, precision=precision, recall=recall,
                     macro_f1=macro_f1(pred, true, n_classes), support=support)


def seed_aggregate(values):
    """Mean and coefficient of variation (100 * population std / mean) across seeds.

    Returns:
        tuple[float, float or None]: The mean, and %CV or None when the mean is 0.

    Raises:
        MetricError: If ``values`` is empty.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricError("seed_aggregate needs at least one value")
    mean = float(values.mean())
    if mean == 0:
        return mean, None
    return mean, float(100.0 * values.std(ddof=0) / mean)
