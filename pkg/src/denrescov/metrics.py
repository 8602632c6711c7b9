"""Classification metrics: confusion matrices, precision/recall/F1, ROC AUC.

Conventions
-----------
* Confusion rows are the target class, columns the predicted class.
* A ratio with a zero denominator evaluates to 0 and is recorded in
  ``MetricsReport.zero_division``.
* ROC curves sweep the distinct score values in descending order, so tied
  scores form one step and the trapezoidal area equals the Mann-Whitney
  statistic with half credit for ties.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

AVERAGES = ("micro", "macro", "weighted")
SUMMARY_ROWS = (
    ("Recall", ("headline", "recall")),
    ("Precision", ("headline", "precision")),
    ("AUC-ROC", ("headline", "auc_roc")),
    ("AUC-ROC macro", ("auc", "macro")),
    ("AUC-ROC micro", ("auc", "micro")),
    ("AUC-ROC weighted", ("auc", "weighted")),
    ("F1", ("headline", "f1")),
    ("F1 macro", ("f1", "macro")),
    ("F1 micro", ("f1", "micro")),
    ("F1 weighted", ("f1", "weighted")),
)


class UndefinedMetricError(InputError):
    pass


# ----------------------------------------------------------- confusion


def confusion(pred, true, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise InputError(f"{pred.size} predictions vs {true.size} targets")
    for name, arr in (("prediction", pred), ("target", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise InputError(f"{name} label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def class_counts_from_confusion(cm, k):
    cm = np.asarray(cm)
    tp = int(cm[k, k])
    fp = int(cm[:, k].sum()) - tp
    fn = int(cm[k, :].sum()) - tp
    return tp, fp, fn


def prf1_counts(tp, fp, fn):
    """(precision, recall, f1, zero_division_flag) from raw counts."""
    p, zp = _ratio(tp, tp + fp)
    r, zr = _ratio(tp, tp + fn)
    f, zf = _ratio(2 * tp, 2 * tp + fp + fn)
    return p, r, f, zp or zr or zf


def prf1(cm, k: int) -> tuple[float, float, float]:
    p, r, f, _ = prf1_counts(*class_counts_from_confusion(cm, k))
    return p, r, f


def aggregate(values=None, supports=None, mode="macro", pooled=None, metric="f1") -> float:
    """Combine per-class values.

    ``macro`` is the unweighted mean and ``weighted`` the support-weighted
    mean of ``values``. ``micro`` recomputes ``metric`` from ``pooled``
    ``(tp, fp, fn)`` totals summed over classes.
    """
    if mode == "micro":
        if pooled is None:
            raise InputError("micro averaging needs pooled (tp, fp, fn) counts")
        tp, fp, fn = pooled
        if tp + fn == 0:
            raise InputError("zero total support")
        p, r, f, _ = prf1_counts(tp, fp, fn)
        return {"precision": p, "recall": r, "f1": f}[metric]
    values = np.asarray(values, dtype=np.float64)
    supports = np.asarray(supports, dtype=np.float64)
    if supports.sum() <= 0:
        raise InputError("zero total support")
    if mode == "macro":
        return float(values.mean())
    if mode == "weighted":
        return float((values * supports).sum() / supports.sum())
    raise InputError(f"unknown averaging mode {mode!r}")


# ----------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, truth) -> tuple[RocCurve, float]:
    """Binary ROC curve and its trapezoidal area."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise InputError("scores and truth differ in length")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: truth contains a single class")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(t)[ends]].astype(np.int64)
    fp = np.r_[0, np.cumsum(~t)[ends]].astype(np.int64)
    # exact integer trapezoid sum, one division at the end
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    curve = RocCurve(fp / n_neg, tp / n_pos, np.r_[np.inf, s[ends]])
    return curve, auc


def multiclass_auc(probs, labels, mode="macro"):
    """One-vs-rest AUC variants for a probability matrix.

    ``per_class_ovr`` returns an array with NaN for classes absent from
    ``labels``; ``macro``/``weighted`` skip those classes with a warning.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    onehot = np.zeros((n, k), dtype=bool)
    onehot[np.arange(n), labels] = True
    if mode == "micro":
        return roc_auc(probs.ravel(), onehot.ravel())[1]
    per_class = np.full(k, np.nan)
    for c in range(k):
        if 0 < onehot[:, c].sum() < n:
            per_class[c] = roc_auc(probs[:, c], onehot[:, c])[1]
    if mode == "per_class_ovr":
        return per_class
    defined = ~np.isnan(per_class)
    if not defined.all():
        warnings.warn(f"OvR AUC undefined for classes {np.flatnonzero(~defined).tolist()}; skipped")
    if not defined.any():
        raise UndefinedMetricError("no class has a defined OvR AUC")
    if mode == "macro":
        return float(per_class[defined].mean())
    if mode == "weighted":
        support = onehot.sum(axis=0)[defined]
        return float((per_class[defined] * support).sum() / support.sum())
    raise InputError(f"unknown AUC mode {mode!r}")


# -------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    classes: list[str]
    confusion: np.ndarray
    per_class: dict[str, dict[str, float]]
    aggregates: dict[str, dict[str, float]]
    headline: dict[str, float]
    roc: dict[str, list[list[float]]] = field(default_factory=dict)
    zero_division: list[str] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def value(self, path) -> float:
        group, key = path
        if group == "headline":
            return self.headline[key]
        return self.aggregates[group][key]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
            "aggregates": self.aggregates,
            "headline": self.headline,
            "roc": self.roc,
            "zero_division": self.zero_division,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path

    @classmethod
    def from_dict(cls, d) -> "MetricsReport":
        return cls(
            d["classes"],
            np.asarray(d["confusion"], dtype=np.int64),
            d["per_class"],
            d["aggregates"],
            d["headline"],
            d.get("roc", {}),
            d.get("zero_division", []),
        )

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate(probs, labels, classes) -> MetricsReport:
    """Full report for a probability matrix and integer targets."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = len(classes)
    if probs.ndim != 2 or probs.shape != (labels.size, k):
        raise InputError(f"probabilities of shape {probs.shape} do not match {labels.size} labels x {k} classes")
    if labels.size == 0:
        raise InputError("cannot evaluate an empty set")
    cm = confusion(probs.argmax(axis=1), labels, k)
    supports = cm.sum(axis=1)
    per_class, flags = {}, []
    prec, rec, f1s = [], [], []
    pooled = np.zeros(3, dtype=np.int64)
    for c, name in enumerate(classes):
        counts = class_counts_from_confusion(cm, c)
        pooled += counts
        p, r, f, flagged = prf1_counts(*counts)
        if flagged:
            flags.append(name)
        prec.append(p), rec.append(r), f1s.append(f)
        per_class[name] = {"precision": p, "recall": r, "f1": f, "support": int(supports[c])}

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ovr = multiclass_auc(probs, labels, "per_class_ovr")
        auc = {mode: _safe_auc(probs, labels, mode) for mode in AVERAGES}
    roc = {}
    for c, name in enumerate(classes):
        per_class[name]["auc"] = None if np.isnan(ovr[c]) else float(ovr[c])
        if not np.isnan(ovr[c]):
            curve, _ = roc_auc(probs[:, c], labels == c)
            roc[name] = [[float(x), float(y)] for x, y in curve.points]

    f1_agg = {
        "micro": aggregate(mode="micro", pooled=tuple(pooled), metric="f1"),
        "macro": aggregate(f1s, supports, "macro"),
        "weighted": aggregate(f1s, supports, "weighted"),
    }
    headline = {
        "recall": aggregate(rec, supports, "macro"),
        "precision": aggregate(prec, supports, "macro"),
        "auc_roc": auc["macro"],
        "f1": f1_agg["macro"],
    }
    return MetricsReport(
        list(classes), cm, per_class, {"f1": f1_agg, "auc": auc}, headline, roc, flags
    )


def _safe_auc(probs, labels, mode):
    try:
        return multiclass_auc(probs, labels, mode)
    except UndefinedMetricError:
        return float("nan")


# ------------------------------------------------------- fold summaries


@dataclass
class FoldSummary:
    rows: dict[str, list[float]]
    mean: dict[str, float]
    sd: dict[str, float]
    combined_confusion: np.ndarray
    classes: list[str]


def summarize_folds(reports: list[MetricsReport]) -> FoldSummary:
    """Per-metric fold values, mean and sample standard deviation (0 for one fold)."""
    if not reports:
        raise InputError("no fold reports to summarize")
    rows, mean, sd = {}, {}, {}
    for label, path in SUMMARY_ROWS:
        values = [float(r.value(path)) for r in reports]
        rows[label] = values
        mean[label] = math.fsum(values) / len(values)
        if len(values) > 1:
            sd[label] = math.sqrt(math.fsum((v - mean[label]) ** 2 for v in values) / (len(values) - 1))
        else:
            sd[label] = 0.0
    combined = sum((r.confusion for r in reports), np.zeros_like(reports[0].confusion))
    return FoldSummary(rows, mean, sd, combined, list(reports[0].classes))


def format_summary(summary: FoldSummary, title: str = "") -> str:
    """Text table: metric rows, one column per fold, max/min markers, mean +- sd (percent)."""
    n = len(next(iter(summary.rows.values())))
    headers = ["Metric (%)"] + [f"Cross validation #{k + 1}" for k in range(n)] + ["Average value"]
    lines = [title] if title else []
    body = []
    for label, values in summary.rows.items():
        cells = []
        finite = [v for v in values if not math.isnan(v)]
        hi = max(finite) if finite else None
        lo = min(finite) if finite else None
        for v in values:
            cell = f"{100 * v:.1f}"
            if n > 1 and hi is not None and hi != lo:
                if v == hi:
                    cell += " (max)"
                elif v == lo:
                    cell += " (min)"
            cells.append(cell)
        cells.append(f"{100 * summary.mean[label]:.1f} +- {100 * summary.sd[label]:.1f}")
        body.append([label] + cells)
    widths = [max(len(row[i]) for row in body + [headers]) for i in range(len(headers))]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))  # noqa: E731
    lines.append(fmt(headers))
    lines.append("-+-".join("-" * w for w in widths))
    lines.extend(fmt(row) for row in body)
    return "\n".join(lines) + "\n"


def format_confusion(cm, classes) -> str:
    corner = "target \\ predicted"
    first = max(len(corner), *(len(c) for c in classes)) + 2
    width = max(8, *(len(c) for c in classes)) + 2
    out = [corner.ljust(first) + "".join(c.rjust(width) for c in classes)]
    for name, row in zip(classes, np.asarray(cm)):
        out.append(name.ljust(first) + "".join(str(int(v)).rjust(width) for v in row))
    return "\n".join(out) + "\n"
