"""Non-parametric multi-prototype bank.

Each class is represented by K unit vectors.  The bank is initialized by
k-means over per-scene class-mean embeddings, updated during training by
an entropically-relaxed optimal-transport assignment of batch features
to prototypes followed by a momentum average, and consulted at inference
to rectify the global classifier's probabilities.  Prototypes are never
updated by gradients.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import kmeans
from .errors import (
    AllIgnored,
    ClassAbsentInScene,
    IoFailure,
    NonFiniteInput,
    ShapeMismatch,
    UninitializedClass,
    ValidationError,
)
from .scene import IGNORE_LABEL, NUM_CLASSES

logger = logging.getLogger(__name__)

_BANK_MAGIC = b"PBNK"
_BANK_VERSION = 1


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass
class PrototypeBank:
    """(C, K, D) unit prototypes plus update hyperparameters.

    ``initialized`` marks classes that received prototypes; similarity
    for uninitialized classes is reported as -1.
    """

    prototypes: np.ndarray
    initialized: np.ndarray
    momentum: float = 0.999
    sharpness: float = 20.0
    sinkhorn_iters: int = 3

    @classmethod
    def empty(
        cls,
        dim: int,
        num_prototypes: int = 3,
        num_classes: int = NUM_CLASSES,
        momentum: float = 0.999,
        sharpness: float = 20.0,
        sinkhorn_iters: int = 3,
    ) -> "PrototypeBank":
        return cls(
            np.zeros((num_classes, num_prototypes, dim)),
            np.zeros(num_classes, dtype=bool),
            momentum,
            sharpness,
            sinkhorn_iters,
        )

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]


def class_mean_feature(embeddings: np.ndarray, labels: np.ndarray, class_id: int) -> np.ndarray:
    """Arithmetic mean of the embeddings labeled ``class_id``."""
    mask = np.asarray(labels) == class_id
    if not mask.any():
        raise ClassAbsentInScene(f"no points of class {class_id} in this scene")
    return np.asarray(embeddings)[mask].mean(axis=0)


def init_bank(
    class_means: dict[int, np.ndarray],
    num_prototypes: int,
    rng: np.random.Generator,
    num_classes: int = NUM_CLASSES,
    momentum: float = 0.999,
    sharpness: float = 20.0,
    sinkhorn_iters: int = 3,
) -> PrototypeBank:
    """Build a bank by k-means over per-scene class-mean embeddings.

    ``class_means`` maps class id to an (n_scenes, D) array.  Classes
    with fewer than K means replicate them cyclically (with a warning);
    classes absent from the mapping stay uninitialized.
    """
    dims = {means.shape[1] for means in class_means.values() if len(means)}
    if not dims:
        raise ValidationError("no class means provided")
    if len(dims) != 1:
        raise ShapeMismatch(f"inconsistent mean dimensions: {sorted(dims)}")
    bank = PrototypeBank.empty(
        dims.pop(), num_prototypes, num_classes, momentum, sharpness, sinkhorn_iters
    )
    for class_id in range(num_classes):
        means = np.asarray(class_means.get(class_id, np.empty((0, 1))))
        if means.size == 0:
            logger.warning("class %d absent from dataset; prototypes uninitialized", class_id)
            continue
        if means.shape[0] < num_prototypes:
            logger.warning(
                "class %d has %d scene means for %d prototypes; replicating cyclically",
                class_id,
                means.shape[0],
                num_prototypes,
            )
            reps = np.resize(np.arange(means.shape[0]), num_prototypes)
            means = means[reps]
        centroids, _ = kmeans(means, num_prototypes, rng=rng)
        bank.prototypes[class_id] = _normalize_rows(centroids)
        bank.initialized[class_id] = True
    return bank


def sinkhorn_assign(
    features: np.ndarray,
    prototypes: np.ndarray,
    sharpness: float = 20.0,
    iters: int = 3,
) -> np.ndarray:
    """Soft assignment of n features to K prototypes.

    Starts from exp(sharpness * features @ prototypes.T), stabilized by
    subtracting the per-row max, then alternates column normalization
    (columns sum to n/K) and row normalization (rows sum to 1) for
    ``iters`` rounds, ending on rows.
    """
    x = np.asarray(features, dtype=np.float64)
    p = np.asarray(prototypes, dtype=np.float64)
    if x.ndim != 2 or p.ndim != 2 or x.shape[1] != p.shape[1]:
        raise ShapeMismatch(f"features {x.shape} vs prototypes {p.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
        raise NonFiniteInput("sinkhorn inputs must be finite")
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    n, k = x.shape[0], p.shape[0]
    logits = sharpness * (x @ p.T)
    logits -= logits.max(axis=1, keepdims=True)
    q = np.exp(logits)
    target_col = n / k
    for _ in range(iters):
        q *= target_col / np.maximum(q.sum(axis=0, keepdims=True), 1e-300)
        q /= np.maximum(q.sum(axis=1, keepdims=True), 1e-300)
    return q


def momentum_update(
    bank: PrototypeBank,
    class_id: int,
    plan: np.ndarray,
    features: np.ndarray,
    momentum: float | None = None,
) -> None:
    """Move class prototypes toward the plan-weighted feature means and
    re-normalize.  momentum == 1 is an exact no-op."""
    if not bank.initialized[class_id]:
        raise UninitializedClass(f"class {class_id} has no initialized prototypes")
    m = bank.momentum if momentum is None else momentum
    if m == 1.0:
        return
    n = features.shape[0]
    if plan.shape != (n, bank.num_prototypes):
        raise ShapeMismatch(f"plan {plan.shape} vs ({n}, {bank.num_prototypes})")
    target = (bank.num_prototypes / n) * (plan.T @ features)
    mixed = m * bank.prototypes[class_id] + (1.0 - m) * target
    bank.prototypes[class_id] = _normalize_rows(mixed)


def proto_similarity(embeddings: np.ndarray, bank: PrototypeBank) -> np.ndarray:
    """S[j, c]: maximum dot product of embedding j with class c's
    prototypes; -1 for uninitialized classes."""
    sims, _ = _similarity_with_argmax(embeddings, bank)
    return sims


def _similarity_with_argmax(
    embeddings: np.ndarray, bank: PrototypeBank
) -> tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != bank.dim:
        raise ShapeMismatch(f"embeddings {emb.shape} vs prototype dim {bank.dim}")
    c, k, d = bank.prototypes.shape
    flat = emb @ bank.prototypes.reshape(c * k, d).T
    per_proto = flat.reshape(emb.shape[0], c, k)
    best = per_proto.argmax(axis=2)
    sims = np.take_along_axis(per_proto, best[:, :, None], axis=2)[:, :, 0]
    sims[:, ~bank.initialized] = -1.0
    return sims, best


def proto_loss(similarities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax of the similarity rows at the true
    class, ignore-labeled points excluded."""
    s = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(labels)
    if s.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{s.shape[0]} similarity rows vs {labels.shape[0]} labels")
    valid = labels != IGNORE_LABEL
    if not valid.any():
        raise AllIgnored("every point is ignore-labeled")
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= s.shape[1]:
        raise ValidationError("labels outside class range")
    rows = s[valid]
    rows = rows - rows.max(axis=1, keepdims=True)
    logp = rows - np.log(np.exp(rows).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(rows.shape[0]), lab].mean())


def rectify(global_probs: np.ndarray, similarities: np.ndarray) -> np.ndarray:
    """Weight the classifier's probabilities by the row softmax of the
    prototype similarities.  No renormalization; downstream argmaxes."""
    probs = np.asarray(global_probs, dtype=np.float64)
    s = np.asarray(similarities, dtype=np.float64)
    if probs.shape != s.shape:
        raise ShapeMismatch(f"probs {probs.shape} vs similarities {s.shape}")
    shifted = s - s.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights * probs


def save_bank(bank: PrototypeBank, path: str | Path) -> None:
    """Versioned binary dump: PBNK header, float32 prototypes, flags."""
    c, k, d = bank.prototypes.shape
    header = struct.pack("<4sIIII", _BANK_MAGIC, _BANK_VERSION, c, k, d)
    body = bank.prototypes.astype("<f4").tobytes()
    flags = bank.initialized.astype(np.uint8).tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header + body + flags)
    except OSError as exc:
        raise IoFailure(f"cannot write bank to {path}: {exc}") from exc


def load_bank(
    path: str | Path,
    momentum: float = 0.999,
    sharpness: float = 20.0,
    sinkhorn_iters: int = 3,
) -> PrototypeBank:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read bank from {path}: {exc}") from exc
    head_size = struct.calcsize("<4sIIII")
    if len(blob) < head_size:
        raise ValidationError(f"{path}: truncated bank file")
    magic, version, c, k, d = struct.unpack_from("<4sIIII", blob)
    if magic != _BANK_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != _BANK_VERSION:
        raise ValidationError(f"{path}: unsupported bank version {version}")
    expected = head_size + 4 * c * k * d + c
    if len(blob) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, got {len(blob)}")
    protos = np.frombuffer(blob, dtype="<f4", count=c * k * d, offset=head_size)
    flags = np.frombuffer(blob, dtype=np.uint8, count=c, offset=head_size + 4 * c * k * d)
    return PrototypeBank(
        protos.astype(np.float64).reshape(c, k, d),
        flags.astype(bool).copy(),
        momentum,
        sharpness,
        sinkhorn_iters,
    )
