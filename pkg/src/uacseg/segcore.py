"""Segmentation array conventions and evaluation metrics.

Arrays are channel-last throughout: images are ``(..., H, W, 3)`` in [0, 1],
logit and probability maps are ``(..., H, W, C)``, label maps and binary
masks are ``(..., H, W)``.  Leading batch axes are allowed wherever the
operation is per-pixel.
"""

from __future__ import annotations

import numpy as np

IGNORE_VALUE = 255
PROB_SUM_TOL = 1e-5


class EmptyEvaluationError(ValueError):
    """Raised when no class has a defined IoU."""


def check_probmap(p, tol: float = PROB_SUM_TOL) -> None:
    p = np.asarray(p)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ValueError(f"probability map needs a class axis, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError("probability map has negative entries")
    err = np.abs(p.sum(axis=-1) - 1.0)
    if err.size and err.max() > tol:
        raise ValueError(f"per-pixel probabilities deviate from 1 by {err.max():.3g}")


def check_mask(m) -> None:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("binary mask entries must be exactly 0 or 1")


def check_labels(labels, num_classes: int, ignore_value: int = IGNORE_VALUE) -> None:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"label map must be integer, got {labels.dtype}")
    ok = ((labels >= 0) & (labels < num_classes)) | (labels == ignore_value)
    if not ok.all():
        bad = np.unique(labels[~ok])
        raise ValueError(f"label values {bad.tolist()} outside [0, {num_classes}) and not ignore")


def _channel_max(x: np.ndarray) -> np.ndarray:
    # slab-wise: numpy reductions over a short trailing axis are slow
    m = x[..., 0].copy()
    for c in range(1, x.shape[-1]):
        np.maximum(m, x[..., c], out=m)
    return m


def _channel_sum(x: np.ndarray) -> np.ndarray:
    s = x[..., 0].copy()
    for c in range(1, x.shape[-1]):
        s += x[..., c]
    return s


def normalize(logits) -> np.ndarray:
    """Softmax over the trailing class axis."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    e = np.exp(logits - _channel_max(logits)[..., None])
    e /= _channel_sum(e)[..., None]
    return e


def argmax_labels(p) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(np.asarray(p), axis=-1).astype(np.int64)


def confusion(pred, gt, num_classes: int, ignore_value: int = IGNORE_VALUE) -> np.ndarray:
    """Confusion counts with rows = ground truth and columns = prediction."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    check_labels(gt, num_classes, ignore_value)
    valid = gt != ignore_value
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"prediction labels outside [0, {num_classes})")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def miou(cm) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    defined = union > 0
    if not defined.any():
        raise EmptyEvaluationError("no class has a non-empty union; nothing was evaluated")
    iou = np.full(cm.shape[0], np.nan)
    iou[defined] = inter[defined] / union[defined]
    return iou, float(iou[defined].mean())
