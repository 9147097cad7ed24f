"""Confusion matrix, per-class recall and balanced accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = true class, cols = predicted
    classes: tuple[str, ...]

    @property
    def per_class_recall(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), support,
                         out=np.zeros(len(support)), where=support > 0)

    @property
    def balanced_accuracy(self) -> float:
        present = self.confusion.sum(axis=1) > 0
        return float(self.per_class_recall[present].mean())

    @property
    def plain_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "per_class_recall": [round(float(r), 12) for r in self.per_class_recall],
            "balanced_accuracy": round(self.balanced_accuracy, 12),
            "plain_accuracy": round(self.plain_accuracy, 12),
            "count": int(self.confusion.sum()),
        }


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, classes) -> Metrics:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty beat set")
    return Metrics(confusion_matrix(y_true, y_pred, len(classes)), tuple(classes))


def evaluate(predict_fn: Callable, beats: Iterable, classes) -> Metrics:
    """Run `predict_fn` on every beat (objects with `.label`) and tabulate."""
    y_true, y_pred = [], []
    for b in beats:
        y_true.append(b.label)
        y_pred.append(int(predict_fn(b)))
    return metrics_from_predictions(y_true, y_pred, classes)


def balanced_accuracy(y_true, y_pred, num_classes: int) -> float:
    return Metrics(confusion_matrix(y_true, y_pred, num_classes),
                   tuple(map(str, range(num_classes)))).balanced_accuracy


def write_confusion_csv(path, m: Metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *m.classes])
        for name, row in zip(m.classes, m.confusion):
            w.writerow([name, *map(int, row)])


def read_confusion_csv(path) -> Metrics:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    classes = tuple(rows[0][1:])
    return Metrics(np.array([[int(v) for v in r[1:]] for r in rows[1:]]), classes)
