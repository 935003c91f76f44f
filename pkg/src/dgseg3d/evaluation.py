"""Confusion-matrix evaluation and (optionally rectified) inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderModel, extract_point_features, forward, softmax
from .errors import LengthMismatch
from .prototypes import PrototypeBank, proto_similarity, rectify
from .scene import IGNORE_LABEL, NUM_CLASSES, PointCloud

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    """confusion[gt, pred] counts with ignore excluded; per-class IoU is
    NaN for classes absent from both; miou averages classes present in
    the ground truth."""

    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "EvalResult":
        confusion = np.asarray(confusion, dtype=np.int64)
        tp = np.diag(confusion).astype(np.float64)
        gt_counts = confusion.sum(axis=1)
        pred_counts = confusion.sum(axis=0)
        union = gt_counts + pred_counts - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
        present = gt_counts > 0
        miou = float(iou[present].mean()) if present.any() else float("nan")
        return cls(confusion, iou, miou)


def confusion_matrix(
    predictions: np.ndarray, ground_truth: np.ndarray, num_classes: int = NUM_CLASSES
) -> np.ndarray:
    """8x8 counts, rows ground truth, columns prediction; ignore-labeled
    ground truth is excluded."""
    pred = np.asarray(predictions).ravel()
    gt = np.asarray(ground_truth).ravel()
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {gt.shape[0]} labels")
    keep = gt != IGNORE_LABEL
    pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise LengthMismatch("predictions outside class range")
    flat = gt * num_classes + pred
    counts = np.bincount(flat.astype(np.int64), minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def evaluate(predictions: np.ndarray, ground_truth: np.ndarray) -> EvalResult:
    """Per-class IoU = TP / (TP + FP + FN) and the mean over classes
    present in the ground truth."""
    return EvalResult.from_confusion(confusion_matrix(predictions, ground_truth))


def infer(
    model: EncoderModel,
    bank: PrototypeBank | None,
    pc: PointCloud,
    rectify_probs: bool = True,
) -> np.ndarray:
    """Predicted labels per point.  With rectification the classifier's
    probabilities are weighted by prototype similarity; an uninitialized
    bank falls back to the plain argmax (logged once per call)."""
    feats = extract_point_features(pc, model.knn)
    emb, logits = forward(model, feats)
    probs = softmax(logits)
    if rectify_probs:
        if bank is not None and bank.initialized.any():
            probs = rectify(probs, proto_similarity(emb, bank))
        else:
            logger.info("rectification requested but bank uninitialized; using global argmax")
    return probs.argmax(axis=1)


def infer_prototype_only(model: EncoderModel, bank: PrototypeBank, pc: PointCloud) -> np.ndarray:
    """Labels from prototype similarity alone (no parametric classifier).
    Used by the non-parametric classifier ablation row."""
    feats = extract_point_features(pc, model.knn)
    emb, _ = forward(model, feats)
    return proto_similarity(emb, bank).argmax(axis=1)
