"""Classification metrics: confusion matrix, per-class P/R/F1, macro F1."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[t, p] += 1
    return cm


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    label_order: list[str]
    per_class: dict[str, dict]
    confusion: list[list[float]]  # row-normalized; zero-support rows stay zero
    confusion_counts: list[list[int]]
    instance_counts: dict[str, int]
    excluded_unknown: int = 0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "accuracy": self.accuracy,
                "macro_f1": self.macro_f1,
                "labels": self.label_order,
                "per_class": self.per_class,
                "confusion_row_normalized": self.confusion,
                "confusion_counts": self.confusion_counts,
                "instance_counts": self.instance_counts,
                "excluded_unknown": self.excluded_unknown,
                **self.extras,
            },
            indent=2,
            sort_keys=True,
        )

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(self.to_json() + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["true\\pred"] + self.label_order)
                for label, row in zip(self.label_order, self.confusion):
                    writer.writerow([label] + [f"{v:.6f}" for v in row])


def evaluate_predictions(
    y_true: Sequence[int], y_pred: Sequence[int], labels: Sequence[str]
) -> EvalReport:
    """Score integer-coded predictions against the given label order.

    Macro F1 averages over classes with at least one true instance; a
    class never predicted keeps F1 = 0 and still counts in the mean.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    n = len(labels)
    cm = confusion_counts(y_true, y_pred, n)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(np.float64)

    precision = np.divide(tp, predicted, out=np.zeros(n), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros(n), where=support > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(n), where=pr > 0)

    present = support > 0
    macro_f1 = float(f1[present].mean()) if present.any() else 0.0
    accuracy = float(tp.sum() / max(len(y_true), 1))

    row_sums = support.astype(np.float64)
    normalized = np.divide(cm, row_sums[:, None], out=np.zeros_like(cm, dtype=np.float64), where=row_sums[:, None] > 0)

    per_class = {
        labels[k]: {
            "precision": float(precision[k]),
            "recall": float(recall[k]),
            "f1": float(f1[k]),
            "support": int(support[k]),
        }
        for k in range(n)
    }
    return EvalReport(
        accuracy=accuracy,
        macro_f1=macro_f1,
        label_order=list(labels),
        per_class=per_class,
        confusion=normalized.tolist(),
        confusion_counts=cm.tolist(),
        instance_counts={labels[k]: int(support[k]) for k in range(n)},
    )
