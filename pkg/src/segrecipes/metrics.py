"""Confusion-matrix bookkeeping and mean intersection-over-union."""
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import EmptyEvaluationError, InvalidLabelError, InvalidShapeError

IGNORE = 255


def empty_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(confusion, pred_labels, gt_labels, ignore=IGNORE):
    """Return ``confusion`` plus counts for one frame (rows gt, cols prediction)."""
    conf = np.asarray(confusion)
    L = conf.shape[0]
    pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    gt = np.asarray(gt_labels).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise InvalidShapeError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.max() >= L or gt.min() < 0):
        raise InvalidLabelError(f"ground-truth label outside [0, {L})")
    if pred.size and (pred.max() >= L or pred.min() < 0):
        raise InvalidLabelError(f"predicted label outside [0, {L})")
    counts = np.bincount(gt * L + pred, minlength=L * L).reshape(L, L)
    return conf + counts


@dataclass
class IoUReport:
    confusion: np.ndarray
    per_class_iou: list  # None for classes absent from both gt and prediction
    miou: float
    present_classes: np.ndarray

    def to_dict(self):
        return {
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "present_classes": [bool(p) for p in self.present_classes],
            "pixel_counts": [int(c) for c in self.confusion.sum(axis=1)],
        }


def miou(confusion):
    """Per-class IoU = TP / (TP + FP + FN); classes with an empty union are skipped.

    The mean is formed from exact rationals so equal scores compare equal.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise EmptyEvaluationError("no class occurs in ground truth or prediction")
    per_class = [float(Fraction(int(t), int(u))) if u > 0 else None for t, u in zip(tp, union)]
    total = sum(Fraction(int(t), int(u)) for t, u in zip(tp[present], union[present]))
    return IoUReport(conf, per_class, float(total / int(present.sum())), present)


def subset_miou(report, classes):
    """Mean IoU over ``classes`` that are present; None if none of them is."""
    vals = [report.per_class_iou[c] for c in classes if report.per_class_iou[c] is not None]
    return sum(vals) / len(vals) if vals else None
