"""Accuracy metrics, JSON reports and dev-accuracy curves."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FeatureDataset
from .errors import ValidationError
from .numkit import MlpClassifier, forward_batch


@dataclass
class EvalReport:
    unweighted_accuracy: float
    plain_accuracy: float
    confusion: np.ndarray  # [C, C], rows true, cols predicted
    n: int
    per_class_recall: list  # None for classes with no support
    excluded_classes: int

    def to_dict(self) -> dict:
        return {
            "unweighted_accuracy": self.unweighted_accuracy,
            "plain_accuracy": self.plain_accuracy,
            "confusion": self.confusion.tolist(),
            "n": self.n,
            "per_class_recall": self.per_class_recall,
            "excluded_classes": self.excluded_classes,
        }


def report_from_predictions(labels, predictions, n_classes: int) -> EvalReport:
    """Metrics from integer labels and predictions.

    Unweighted accuracy is the mean per-class recall over classes that occur
    in ``labels``; absent classes are left out and counted.
    """
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    recalls = [float(confusion[k, k] / support[k]) if support[k] else None for k in range(n_classes)]
    present = [r for r in recalls if r is not None]
    return EvalReport(
        unweighted_accuracy=float(np.mean(present)),
        plain_accuracy=float(np.trace(confusion) / labels.size),
        confusion=confusion,
        n=int(labels.size),
        per_class_recall=recalls,
        excluded_classes=int(n_classes - len(present)),
    )


def predict(model: MlpClassifier, features) -> np.ndarray:
    """Eval-mode argmax; ties go to the lowest class index."""
    logits, _ = forward_batch(model, features, mode="eval")
    return np.argmax(logits, axis=1)


def evaluate(model: MlpClassifier, data: FeatureDataset) -> EvalReport:
    data.require_labeled("evaluation data")
    if data.n_classes != model.n_classes:
        raise ValidationError(f"model has {model.n_classes} classes, data has {data.n_classes}")
    return report_from_predictions(data.labels, predict(model, data.features), data.n_classes)


def unweighted_accuracy(model: MlpClassifier, data: FeatureDataset) -> float:
    return evaluate(model, data).unweighted_accuracy


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_report(path, report: EvalReport, config: dict | None = None, seed=None, **extra) -> Path:
    doc = report.to_dict()
    doc["config_hash"] = config_hash(config or {})
    doc["seed"] = seed
    doc.update(extra)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def curve_export(metric_log) -> list:
    """(step, dev_ua) rows for plotting.

    ``metric_log`` holds (step, loss, dev_ua, ...) tuples or dicts. Entries
    without a dev value are skipped; repeated steps keep the first value.
    Steps going backwards mean the log is corrupt and raise.
    """
    if not metric_log:
        raise ValidationError("metric log is empty")
    rows, last = [], None
    for entry in metric_log:
        if isinstance(entry, dict):
            step, ua = entry["step"], entry.get("dev_ua")
        else:
            step, ua = entry[0], entry[2]
        if last is not None and step < last:
            raise ValidationError(f"metric log out of order at step {step} (after {last})")
        if ua is not None and (not rows or rows[-1][0] != step):
            rows.append((int(step), float(ua)))
        last = step
    return rows


def write_curve_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "dev_ua"])
        w.writerows(rows)
    return path
