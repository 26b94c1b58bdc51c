"""Confusion matrices, per-class precision/recall/F1, and report files.

Matrix orientation: rows are true labels, columns are predictions.
A 0/0 ratio is reported as 0 and the class is flagged as degenerate.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError


def confusion_matrix(true_labels, predicted_labels, num_classes: int) -> np.ndarray:
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise DataError(f"{true_labels.size} true labels but {predicted_labels.size} predictions")
    for what, labels in (("true", true_labels), ("predicted", predicted_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise DataError(f"{what} label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (true_labels, predicted_labels), 1)
    return matrix


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


def precision_recall_f1(matrix) -> list[ClassMetrics]:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError(f"confusion matrix must be square, got shape {matrix.shape}")
    out = []
    for j in range(matrix.shape[0]):
        tp = matrix[j, j]
        predicted = matrix[:, j].sum()
        actual = matrix[j, :].sum()
        degenerate = False
        if predicted:
            precision = tp / predicted
        else:
            precision, degenerate = 0.0, True
        if actual:
            recall = tp / actual
        else:
            recall, degenerate = 0.0, True
        if precision + recall > 0:
            f1 = 2 * precision * recall / (precision + recall)
        else:
            f1, degenerate = 0.0, True
        out.append(ClassMetrics(float(precision), float(recall), float(f1), int(actual), degenerate))
    return out


def accuracy(matrix) -> float:
    matrix = np.asarray(matrix)
    total = matrix.sum()
    return float(np.trace(matrix) / total) if total else 0.0


def micro_recall(matrix) -> float:
    """Pooled TP over pooled (TP + FN); identical to accuracy for single-label data."""
    matrix = np.asarray(matrix)
    tp = sum(int(matrix[j, j]) for j in range(matrix.shape[0]))
    positives = sum(int(matrix[j, :].sum()) for j in range(matrix.shape[0]))
    return tp / positives if positives else 0.0


@dataclass
class EvalReport:
    class_names: list[str]
    matrix: np.ndarray
    metrics: list[ClassMetrics] = field(default_factory=list)
    accuracy: float = 0.0

    @classmethod
    def from_predictions(cls, class_names, true_labels, predicted_labels) -> "EvalReport":
        matrix = confusion_matrix(true_labels, predicted_labels, len(class_names))
        return cls.from_matrix(class_names, matrix)

    @classmethod
    def from_matrix(cls, class_names, matrix) -> "EvalReport":
        matrix = np.asarray(matrix, dtype=np.int64)
        return cls(list(class_names), matrix, precision_recall_f1(matrix), accuracy(matrix))

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def to_dict(self) -> dict:
        return {
            "classes": self.class_names,
            "confusion_matrix": self.matrix.tolist(),
            "accuracy": round(self.accuracy, 4),
            "items": self.total,
            "per_class": {
                name: {
                    "precision": round(m.precision, 4),
                    "recall": round(m.recall, 4),
                    "f1": round(m.f1, 4),
                    "support": m.support,
                    "degenerate": m.degenerate,
                }
                for name, m in zip(self.class_names, self.metrics)
            },
        }


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def confusion_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *report.class_names])
    for name, row in zip(report.class_names, report.matrix):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def metrics_table(report: EvalReport) -> str:
    width = max(len("class"), *(len(n) for n in report.class_names))
    lines = [f"{'class':<{width}}  precision  recall     f1         support  flag"]
    for name, m in zip(report.class_names, report.metrics):
        flag = "degenerate" if m.degenerate else ""
        lines.append(f"{name:<{width}}  {m.precision:<9.4f}  {m.recall:<9.4f}  {m.f1:<9.4f}  {m.support:<7d}  {flag}".rstrip())
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir) -> None:
    """Write confusion_matrix.csv, metrics.txt, metrics.json and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "confusion_matrix.csv", confusion_csv(report))
    _write(out / "metrics.txt", metrics_table(report))
    _write(out / "metrics.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _write(out / "summary.txt", f"items: {report.total}\naccuracy: {report.accuracy:.4f}\n")


def cv_summary_table(fold_accuracies: dict[str, list[float]]) -> str:
    """Fold rows plus an ``Average`` row, one column per architecture; accuracies in percent.

    The first header row carries the spanning caption, the second the
    architecture names, the usual layout for reporting k-fold results.
    """
    names = list(fold_accuracies)
    folds = len(next(iter(fold_accuracies.values())))
    col = max(12, *(len(n) for n in names))
    lines = [
        f"{'Fold':<8}  Classification overall accuracy in %",
        f"{'':<8}" + "".join(f"  {n:>{col}}" for n in names),
    ]
    for i in range(folds):
        lines.append(f"{i + 1:<8}" + "".join(f"  {100 * fold_accuracies[n][i]:>{col}.4f}" for n in names))
    lines.append(f"{'Average':<8}" + "".join(f"  {100 * float(np.mean(fold_accuracies[n])):>{col}.4f}" for n in names))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def cv_summary_csv(fold_accuracies: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(fold_accuracies)
    writer.writerow(["fold", *names])
    folds = len(next(iter(fold_accuracies.values())))
    for i in range(folds):
        writer.writerow([i + 1, *(f"{100 * fold_accuracies[n][i]:.4f}" for n in names)])
    writer.writerow(["Average", *(f"{100 * float(np.mean(fold_accuracies[n])):.4f}" for n in names)])
    return buf.getvalue()


def emit_cv_summary(fold_accuracies: dict[str, list[float]], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "summary.txt", cv_summary_table(fold_accuracies))
    _write(out / "summary.csv", cv_summary_csv(fold_accuracies))
