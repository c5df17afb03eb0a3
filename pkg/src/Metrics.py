"""Segmentation metrics from a confusion matrix."""
from dataclasses import asdict, dataclass

import numpy as np

from Errors import DimensionError, IndexRangeError


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iou: float
    per_class_accuracy: list
    per_class_iou: list
    confusion: list

    def to_record(self):
        return asdict(self)


def confusion_matrix(pred, ref, num_classes):
    """Rows are reference classes, columns predicted classes."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise DimensionError('shape', ref.shape, pred.shape, 'evaluate')
    for name, labels in (('prediction', pred), ('reference', ref)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise IndexRangeError(f"{name} label outside 0..{num_classes - 1}")
    index = num_classes * ref.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    return np.bincount(index, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _or_none(values, defined):
    return [float(v) if ok else None for v, ok in zip(values, defined)]


def evaluate(pred, ref, num_classes):
    """Pixel accuracy, class accuracies and IoUs.

    Mean accuracy averages the classes present in the reference; mean IoU the
    classes present in the reference or the prediction.
    """
    cm = confusion_matrix(pred, ref, num_classes)
    tp = np.diag(cm).astype(np.float64)
    in_ref = cm.sum(axis=1)
    in_pred = cm.sum(axis=0)
    union = in_ref + in_pred - tp
    with np.errstate(divide='ignore', invalid='ignore'):
        acc = tp / in_ref
        iou = tp / union
    has_ref = in_ref > 0
    present = union > 0
    total = cm.sum()
    return MetricsReport(
        pixel_accuracy=float(tp.sum() / total) if total else 0.0,
        mean_accuracy=float(acc[has_ref].mean()) if has_ref.any() else 0.0,
        mean_iou=float(iou[present].mean()) if present.any() else 0.0,
        per_class_accuracy=_or_none(acc, has_ref),
        per_class_iou=_or_none(iou, present),
        confusion=cm.tolist(),
    )
