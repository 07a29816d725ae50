"""Evaluation metrics, the fusion-weight regression diagnostic, and CSV output.

metrics.csv columns are fixed:
  round, client_id, classification_loss, discrimination_loss,
  discriminator_accuracy, fused_loss, fusion_weight, train_accuracy,
  test_accuracy, macro_f1, aggregation_weight
with one row per (round, client) plus one "global" row per round. Floats are
written with Python's shortest round-trip repr, missing values as empty cells.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .data import Dataset
from .models import Mlp, encode

METRICS_COLUMNS = [
    "round",
    "client_id",
    "classification_loss",
    "discrimination_loss",
    "discriminator_accuracy",
    "fused_loss",
    "fusion_weight",
    "train_accuracy",
    "test_accuracy",
    "macro_f1",
    "aggregation_weight",
]


@dataclass
class MetricsRow:
    round: int
    client_id: str  # client index as text, or "global"
    classification_loss: float | None = None
    discrimination_loss: float | None = None
    discriminator_accuracy: float | None = None
    fused_loss: float | None = None
    fusion_weight: float | None = None
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    macro_f1: float | None = None
    aggregation_weight: float | None = None


def evaluate(predict_fn, test_set: Dataset):
    """(accuracy, macro_f1) of predict_fn over the test set.

    Macro-F1 averages per-class F1 over the classes that occur in the true
    labels; classes absent from the test set are excluded from the mean.
    """
    if len(test_set) == 0:
        raise ValueError("empty test set")
    predicted = np.asarray(predict_fn(test_set.features))
    truth = test_set.labels
    accuracy = float(np.mean(predicted == truth))

    scores = []
    for cls in np.unique(truth):
        tp = np.sum((predicted == cls) & (truth == cls))
        fp = np.sum((predicted == cls) & (truth != cls))
        fn = np.sum((predicted != cls) & (truth == cls))
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return accuracy, float(np.mean(scores))


def confusion_matrix(truth, predicted, num_classes: int) -> np.ndarray:
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(truth), np.asarray(predicted)):
        matrix[t, p] += 1
    return matrix


def ols_fit(x, y):
    """Ordinary least squares of y on x; returns (slope, intercept)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(x) != len(y):
        raise ValueError("need at least two (x, y) points")
    x_mean, y_mean = x.mean(), y.mean()
    var = np.sum((x - x_mean) ** 2)
    if var == 0.0:
        raise ValueError("degenerate variance: all x values identical")
    slope = float(np.sum((x - x_mean) * (y - y_mean)) / var)
    return slope, float(y_mean - slope * x_mean)


def regression_discloss_vs_fusion(rows: list[MetricsRow]):
    """OLS of fusion weight on discrimination loss over per-client rows."""
    points = [
        (r.discrimination_loss, r.fusion_weight)
        for r in rows
        if r.client_id != "global"
        and r.discrimination_loss is not None
        and r.fusion_weight is not None
    ]
    if len(points) < 2:
        raise ValueError("need at least two clients with recorded losses")
    return ols_fit([p[0] for p in points], [p[1] for p in points])


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_metrics_csv(rows: list[MetricsRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(_format_cell(getattr(row, f.name)) for f in fields(MetricsRow))


def read_metrics_csv(path: str) -> list[MetricsRow]:
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics columns in {path}")
        for record in reader:
            kwargs = {"round": int(record["round"]), "client_id": record["client_id"]}
            for name in METRICS_COLUMNS[2:]:
                kwargs[name] = float(record[name]) if record[name] != "" else None
            rows.append(MetricsRow(**kwargs))
    return rows


def export_features_csv(encoder: Mlp, dataset: Dataset, path: str) -> None:
    """One row per sample: encoder features then the class label."""
    features = encode(encoder, dataset.features)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"f{i}" for i in range(features.shape[1])] + ["label"])
        for row, label in zip(features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [str(int(label))])
