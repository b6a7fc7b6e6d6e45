"""Predictive and interpretability metrics."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ContractError, MetricError
from .numerics import Rng

SCHEMA_VERSION = 1


def confusion_counts(y_true, y_pred, n_classes: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def roc_curve(is_pos, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) over distinct score thresholds, descending.

    Starts at (0, 0) with threshold +inf and ends at (1, 1).
    """
    is_pos = np.asarray(is_pos, dtype=bool)
    s = nx.as_array(scores)
    order = np.argsort(-s, kind="mergesort")
    s, is_pos = s[order], is_pos[order]
    # last index of each run of tied scores
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(is_pos)[cut]
    fp = (cut + 1) - tp
    P, N = int(is_pos.sum()), int((~is_pos).sum())
    tpr = np.r_[0.0, tp / P if P else np.zeros(cut.size)]
    fpr = np.r_[0.0, fp / N if N else np.zeros(cut.size)]
    return fpr, tpr, np.r_[np.inf, s[cut]]


def pr_curve(is_pos, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(recall, precision, thresholds); starts at recall 0, precision 1."""
    is_pos = np.asarray(is_pos, dtype=bool)
    s = nx.as_array(scores)
    order = np.argsort(-s, kind="mergesort")
    s, is_pos = s[order], is_pos[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(is_pos)[cut]
    predicted = cut + 1
    P = int(is_pos.sum())
    recall = np.r_[0.0, tp / P if P else np.zeros(cut.size)]
    precision = np.r_[1.0, tp / predicted]
    return recall, precision, np.r_[np.inf, s[cut]]


def auc_roc(is_pos, scores) -> float | None:
    """Trapezoidal area under the ROC curve; None without both classes."""
    is_pos = np.asarray(is_pos, dtype=bool)
    if is_pos.all() or not is_pos.any():
        return None
    fpr, tpr, _ = roc_curve(is_pos, scores)
    return float(np.trapezoid(tpr, fpr))


def auc_pr(is_pos, scores) -> float | None:
    is_pos = np.asarray(is_pos, dtype=bool)
    if not is_pos.any():
        return None
    recall, precision, _ = pr_curve(is_pos, scores)
    return float(np.trapezoid(precision, recall))


@dataclass
class MetricsReport:
    n: int = 0
    accuracy: float = 0.0
    precision_macro: float = 0.0
    recall_macro: float = 0.0
    f1_macro: float = 0.0
    auc_roc_per_class: list[float | None] = field(default_factory=list)
    auc_roc_macro: float | None = None
    auc_pr_per_class: list[float | None] = field(default_factory=list)
    auc_pr_macro: float | None = None
    confusion: list[list[int]] = field(default_factory=list)
    faithfulness: float | None = None
    faithfulness_gradient: str | None = None
    stability: float | None = None
    stability_epsilon: float | None = None
    comprehensiveness: float | None = None
    sufficiency: float | None = None
    top_k: int | None = None
    explanation_time_ms: float | None = None
    explanation_time_std_ms: float | None = None

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        out.update({f: getattr(self, f) for f in self.__dataclass_fields__})
        return out


def _macro(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def classification_metrics(y_true, y_pred, scores, n_classes: int | None = None) -> MetricsReport:
    """Accuracy, macro precision/recall/F1 and one-vs-rest AUCs.

    Macro averages run over classes that occur in ``y_true`` or ``y_pred``;
    per-class precision, recall and F1 use 0/0 := 0. AUCs are skipped (None)
    for classes without both positives and negatives.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    scores = np.atleast_2d(nx.as_array(scores))
    if y_true.size == 0:
        raise ContractError("classification_metrics needs at least one sample")
    if y_pred.shape != y_true.shape or scores.shape[0] != y_true.size:
        raise ContractError("y_true, y_pred and scores must have the same length")
    K = n_classes if n_classes is not None else scores.shape[1]
    cm = confusion_counts(y_true, y_pred, K)
    tp = np.diag(cm).astype(float)
    present = [c for c in range(K) if cm[c, :].sum() or cm[:, c].sum()]
    prec = [_ratio(tp[c], cm[:, c].sum()) for c in present]
    rec = [_ratio(tp[c], cm[c, :].sum()) for c in present]
    f1 = [_ratio(2 * p * r, p + r) for p, r in zip(prec, rec)]
    roc = [auc_roc(y_true == c, scores[:, c]) for c in range(K)]
    pr = [auc_pr(y_true == c, scores[:, c]) for c in range(K)]
    return MetricsReport(
        n=int(y_true.size),
        accuracy=float(tp.sum() / y_true.size),
        precision_macro=float(np.mean(prec)),
        recall_macro=float(np.mean(rec)),
        f1_macro=float(np.mean(f1)),
        auc_roc_per_class=roc, auc_roc_macro=_macro(roc),
        auc_pr_per_class=pr, auc_pr_macro=_macro(pr),
        confusion=cm.tolist(),
    )


# ---------------------------------------------------------------------------
# interpretability
# ---------------------------------------------------------------------------

def faithfulness(alpha, grads, signed: bool = False) -> float:
    """Pearson correlation of attention with gradient magnitude.

    With ``signed=True`` the raw gradient is used instead of its absolute
    value. Degenerate inputs (fewer than two entries, or zero variance on
    either side) score 0.
    """
    a = nx.as_array(alpha).ravel()
    g = nx.as_array(grads).ravel()
    g = g if signed else np.abs(g)
    if a.size < 2 or a.size != g.size:
        if a.size != g.size:
            raise ContractError("faithfulness: length mismatch")
        return 0.0
    a, g = a - a.mean(), g - g.mean()
    na, ng = np.linalg.norm(a), np.linalg.norm(g)
    if na == 0 or ng == 0:
        return 0.0
    return float(np.clip(a @ g / (na * ng), -1.0, 1.0))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def stability(explainer: Callable[[np.ndarray], np.ndarray], inputs, epsilon: float = 0.05,
              trials: int = 1, rng: Rng | None = None) -> float:
    """``1 - mean ||e(x) - e(x + eps)||`` with unit-normalized explanations.

    ``eps`` is i.i.d. Gaussian with standard deviation ``epsilon``.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    X = np.atleast_2d(nx.as_array(inputs))
    rng = rng if rng is not None else Rng(0)
    total, count = 0.0, 0
    for t in range(trials):
        noise = rng.stream("stability", t).normal(0.0, epsilon, size=X.shape)
        for x, e in zip(X, noise):
            base = _unit(nx.as_array(explainer(x)))
            moved = _unit(nx.as_array(explainer(x + e)))
            total += float(np.linalg.norm(base - moved))
            count += 1
    return 1.0 - total / count


def _accuracy(predict, X, y) -> float:
    return float(np.mean(np.asarray(predict(X)) == np.asarray(y)))


def _masked(X: np.ndarray, keep: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    return np.where(keep, X, baseline)


def _check(X, ranking, k):
    d = X.shape[1]
    if not 0 <= k <= d:
        raise ContractError(f"k={k} outside [0, {d}]")
    ranking = np.asarray(ranking, dtype=int)
    if ranking.size < k:
        raise ContractError("ranking shorter than k")
    keep = np.zeros(d, dtype=bool)
    keep[ranking[:k]] = True
    return keep


def sufficiency(predict, X, y, ranking, k: int, baseline=None) -> float:
    """``acc(only top-k kept) / acc(all)``; others are set to ``baseline``."""
    X = np.atleast_2d(nx.as_array(X))
    keep = _check(X, ranking, k)
    baseline = np.zeros(X.shape[1]) if baseline is None else nx.as_array(baseline)
    full = _accuracy(predict, X, y)
    if full == 0:
        raise MetricError("full-feature accuracy is 0; sufficiency undefined")
    if keep.all():
        return 1.0
    return _accuracy(predict, _masked(X, keep, baseline), y) / full


def comprehensiveness(predict, X, y, ranking, k: int, baseline=None) -> float:
    """``1 - acc(top-k set to baseline) / acc(all)``."""
    X = np.atleast_2d(nx.as_array(X))
    removed = _check(X, ranking, k)
    baseline = np.zeros(X.shape[1]) if baseline is None else nx.as_array(baseline)
    full = _accuracy(predict, X, y)
    if full == 0:
        raise MetricError("full-feature accuracy is 0; comprehensiveness undefined")
    if not removed.any():
        return 0.0
    return 1.0 - _accuracy(predict, _masked(X, ~removed, baseline), y) / full


def explanation_timing(explainer: Callable[[np.ndarray], object], inputs,
                       repeats: int = 3) -> tuple[float, float]:
    """Mean and standard deviation of wall-clock milliseconds per input.

    One untimed warm-up pass precedes ``repeats`` timed passes.
    """
    if repeats < 3:
        raise ContractError("repeats must be >= 3")
    X = np.atleast_2d(nx.as_array(inputs))
    for x in X:
        explainer(x)
    per_input = []
    for _ in range(repeats):
        start = time.perf_counter()
        for x in X:
            explainer(x)
        per_input.append((time.perf_counter() - start) * 1000.0 / X.shape[0])
    return float(np.mean(per_input)), float(np.std(per_input))
