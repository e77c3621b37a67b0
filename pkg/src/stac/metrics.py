"""Segmentation accuracy metrics."""

from __future__ import annotations

import numpy as np


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return float((pred == truth).mean())


def mean_iou(pred: np.ndarray, truth: np.ndarray, class_count: int,
             void_label: int | None = None) -> float:
    """Mean over classes of |pred AND truth| / |pred OR truth|.

    Classes absent from both maps are skipped; ``void_label`` pixels are
    excluded from every class.
    """
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if void_label is not None:
        keep = truth != void_label
        pred = pred[keep]
        truth = truth[keep]
    ious = []
    for c in range(class_count):
        if void_label is not None and c == void_label:
            continue
        p = pred == c
        t = truth == c
        union = int(np.logical_or(p, t).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(p, t).sum()) / union)
    return float(np.mean(ious)) if ious else 0.0
