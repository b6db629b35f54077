"""Intersection-over-union evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, InvalidLabelError


@dataclass
class EvalReport:
    per_class_iou: np.ndarray   # (K,), NaN where the class is absent from both maps
    present: np.ndarray         # (K,) bool, class occurs in ground truth
    miou: float                 # mean IoU over classes present in ground truth
    pixel_accuracy: float
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "present_in_gt": [bool(p) for p in self.present],
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "miou_policy": "mean over classes present in ground truth",
            "config_fingerprint": self.fingerprint,
        }


def confusion_matrix(pred, gt, K) -> np.ndarray:
    """(K, K) counts with rows = ground truth, columns = prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= K):
            raise InvalidLabelError(f"{name} labels must lie in [0, {K})")
    idx = gt.astype(np.int64).ravel() * K + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=K * K).reshape(K, K)


def report_from_confusion(conf, fingerprint="") -> EvalReport:
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    union = gt_count + conf.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = gt_count > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    total = conf.sum()
    acc = float(tp.sum() / total) if total else float("nan")
    return EvalReport(iou, present, miou, acc, fingerprint)


def compute_miou(pred, gt, K, fingerprint="") -> EvalReport:
    """IoU per class and their mean over classes that occur in ``gt``.

    ``pred`` and ``gt`` may be single label maps or stacks; a stack is
    scored through one accumulated confusion matrix.
    """
    return report_from_confusion(confusion_matrix(pred, gt, K), fingerprint)
