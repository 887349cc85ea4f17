"""Instance-level metrics: accuracy, confusion matrix, per-class IoU and mIoU."""
from __future__ import annotations

import hashlib
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nets import load_checkpoint
from .trainer import predict


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    counts: np.ndarray

    @classmethod
    def from_labels(cls, truths, preds, n_classes: int) -> "ConfusionMatrix":
        truths = np.asarray(truths, dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        if truths.shape != preds.shape:
            raise ValueError("truths and preds differ in length")
        if truths.size and (min(truths.min(), preds.min()) < 0
                            or max(truths.max(), preds.max()) >= n_classes):
            raise ValueError(f"labels outside 0..{n_classes - 1}")
        flat = np.bincount(n_classes * truths + preds, minlength=n_classes ** 2)
        return cls(flat.reshape(n_classes, n_classes))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(preds, truths) -> float:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape != truths.shape:
        raise ValueError("preds and truths differ in length")
    if preds.size == 0:
        raise ValueError("no labels to score")
    return float(np.mean(preds == truths))


def miou(confusion: ConfusionMatrix):
    """Per-class IoU and their mean.

    A class absent from both truth and prediction has no IoU; its entry is
    NaN and it does not enter the mean.  Ratios are formed exactly from the
    integer counts and rounded once.
    """
    cm = np.asarray(confusion.counts if isinstance(confusion, ConfusionMatrix) else confusion)
    if cm.size == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.int64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("mIoU undefined: no class appears in truth or prediction")
    exact = [Fraction(int(t), int(u)) for t, u in zip(tp[present], union[present])]
    iou = np.full(tp.shape, np.nan)
    iou[present] = [float(q) for q in exact]
    return iou, float(sum(exact) / len(exact))


@dataclass
class EvalReport:
    accuracy: float
    per_class_iou: np.ndarray
    miou: float
    confusion: ConfusionMatrix
    binary_accuracy: float
    method: str = ""
    seed: Optional[int] = None
    fingerprint: str = ""

    def metrics(self) -> dict:
        return {"accuracy": self.accuracy, "miou": self.miou, "binary_accuracy": self.binary_accuracy}

    def to_text(self) -> str:
        lines = [f"method\t{self.method}", f"seed\t{self.seed}", f"fingerprint\t{self.fingerprint}"]
        lines += [f"{k}\t{v!r}" for k, v in self.metrics().items()]
        lines.append("per_class_iou\t" + "\t".join(repr(float(v)) for v in self.per_class_iou))
        for row in self.confusion.counts:
            lines.append("confusion\t" + "\t".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def fingerprint(bags) -> str:
    h = hashlib.sha256()
    for bag in bags:
        h.update(np.ascontiguousarray(bag.features).tobytes())
        h.update(bag.true_labels.tobytes())
    return h.hexdigest()[:16]


def evaluate(model, bags, threshold: float = 0.5, method: str = "", seed=None) -> EvalReport:
    """Score every instance of every bag against its true label.

    ``model`` may be a trained model or a checkpoint path.
    """
    if not hasattr(model, "blocks"):
        model = load_checkpoint(model).model
    if not bags:
        raise ValueError("no bags to evaluate")
    X = np.concatenate([b.features for b in bags])
    y = np.concatenate([b.true_labels for b in bags])
    pred, _, _ = predict(model, X, threshold)
    n_classes = model.num_classes + 1
    cm = ConfusionMatrix.from_labels(y, pred, n_classes)
    iou, m = miou(cm)
    return EvalReport(accuracy(pred, y), iou, m, cm, accuracy(pred > 0, y > 0),
                      method, seed, fingerprint(bags))
