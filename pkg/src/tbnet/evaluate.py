"""Screening metrics: confusion matrix, accuracy, sensitivity, specificity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, PreprocessSpec, load_images

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with TB positive (label 1) as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, predictions, labels) -> "ConfusionMatrix":
        p = np.asarray(predictions, dtype=np.int64).ravel()
        y = np.asarray(labels, dtype=np.int64).ravel()
        if p.shape != y.shape:
            raise ValueError(f"{p.size} predictions vs {y.size} labels")
        for name, arr in (("prediction", p), ("label", y)):
            bad = arr[(arr != 0) & (arr != 1)]
            if bad.size:
                raise ValueError(f"{name} {bad[0]} outside {{0, 1}}")
        return cls(
            tp=int(np.sum((p == 1) & (y == 1))),
            fp=int(np.sum((p == 1) & (y == 0))),
            tn=int(np.sum((p == 0) & (y == 0))),
            fn=int(np.sum((p == 0) & (y == 1))),
        )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """Accuracy, sensitivity and specificity as fractions.

    A metric whose denominator is zero is ``None`` (undefined), never 0 or 1.
    """
    return {
        "accuracy": _ratio(cm.tp + cm.tn, cm.total),
        "sensitivity": _ratio(cm.tp, cm.tp + cm.fn),
        "specificity": _ratio(cm.tn, cm.tn + cm.fp),
    }


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the two classes; an exact tie goes to the negative class."""
    probs = np.asarray(probs)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def predict_proba(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [model.predict_proba(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, 2), dtype=np.float32)
    return np.concatenate(out)


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    metrics: dict[str, float | None]
    probabilities: np.ndarray
    labels: np.ndarray

    def to_dict(self, split: str | None = None) -> dict:
        return report_dict(self.confusion, split)


def evaluate_arrays(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> Evaluation:
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    probs = predict_proba(model, images, batch_size)
    cm = ConfusionMatrix.from_predictions(predicted_labels(probs), labels)
    return Evaluation(cm, metrics(cm), probs, np.asarray(labels))


def evaluate(model, manifest: DatasetManifest, split: str = "test",
             spec: PreprocessSpec | None = None, batch_size: int = 32) -> Evaluation:
    """Deterministic, un-augmented evaluation of one split."""
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    spec = spec or PreprocessSpec(target_size=tuple(model.config.input_size))
    images = load_images(manifest, records, spec)
    return evaluate_arrays(model, images, manifest.labels(split), batch_size)


def report_dict(cm: ConfusionMatrix, split: str | None = None) -> dict:
    d = {"schema_version": SCHEMA_VERSION, "confusion": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
         "n": cm.total, **metrics(cm)}
    if split is not None:
        d["split"] = split
    return d


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def format_table(cm: ConfusionMatrix, name: str = "TB-Net") -> str:
    """Plain-text table with the Accuracy / Sensitivity / Specificity columns."""
    m = metrics(cm)
    header = f"| {'Architecture':<14} | {'Accuracy (%)':>12} | {'Sensitivity (%)':>15} | {'Specificity (%)':>15} |"
    rule = "-" * len(header)
    row = (f"| {name:<14} | {_pct(m['accuracy']):>12} | {_pct(m['sensitivity']):>15} "
           f"| {_pct(m['specificity']):>15} |")
    return "\n".join([rule, header, rule, row, rule])
