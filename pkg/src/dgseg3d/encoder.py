"""Per-point feature extraction, the MLP encoder with its global linear
classifier, the combined training loss, and the optimizer.

The encoder is a small fixed-topology MLP evaluated and differentiated
by hand in numpy; embeddings are L2-normalized so prototype dot products
stay in [-1, 1].  The optimizer is the decoupled-weight-decay adaptive
moment scheme with a polynomial learning-rate decay.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyBatch, IoFailure, ShapeMismatch, ValidationError
from .prototypes import PrototypeBank, _similarity_with_argmax
from .scene import IGNORE_LABEL, NUM_CLASSES, PointCloud

FEATURE_DIM = 10

_MODEL_MAGIC = b"PENC"
_MODEL_VERSION = 1
_NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# features


def extract_point_features(pc: PointCloud, k: int = 16) -> np.ndarray:
    """Deterministic (N, 10) per-point descriptors.

    Columns: xy centered at the scene mean and z at the floor-level
    mean, height above the lowest point, k-NN mean offset scaled by the
    RMS neighbor distance, and the neighborhood covariance eigenvalues
    (descending) normalized by their sum.  The scale normalizations keep
    the descriptors comparable across sampling densities.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    pos = pc.positions
    n = pos.shape[0]
    feats = np.zeros((n, FEATURE_DIM))
    center = np.array([pos[:, 0].mean(), pos[:, 1].mean(), pos[:, 2].mean()])
    floor_ref = pos[:, 2].min()
    feats[:, 0:3] = pos - center
    feats[:, 3] = pos[:, 2] - floor_ref

    k = min(k, n - 1)
    if k >= 1:
        _, idx = cKDTree(pos).query(pos, k=k + 1)
        neighbors = pos[idx[:, 1:]]  # drop self
        offsets = neighbors - pos[:, None, :]
        mean_offset = offsets.mean(axis=1)
        rms = np.sqrt(np.einsum("nkd,nkd->n", offsets, offsets) / k)
        feats[:, 4:7] = mean_offset / np.maximum(rms, _NORM_EPS)[:, None]
        centered = offsets - mean_offset[:, None, :]
        cov = np.einsum("nkd,nke->nde", centered, centered) / k
        eig = np.linalg.eigvalsh(cov)[:, ::-1]  # descending
        feats[:, 7:10] = eig / np.maximum(eig.sum(axis=1, keepdims=True), _NORM_EPS)
    return feats


# ---------------------------------------------------------------------------
# model


@dataclass
class EncoderModel:
    """MLP weights plus the global linear classifier."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    phi: np.ndarray
    phi_bias: np.ndarray
    knn: int = 16

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int = FEATURE_DIM,
        hidden_dims: tuple[int, ...] = (64, 128),
        embed_dim: int = 32,
        num_classes: int = NUM_CLASSES,
        knn: int = 16,
    ) -> "EncoderModel":
        dims = [in_dim, *hidden_dims, embed_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        phi = rng.normal(0.0, np.sqrt(1.0 / embed_dim), size=(num_classes, embed_dim))
        return cls(weights, biases, phi, np.zeros(num_classes), knn)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.phi.shape[0]

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            items.append((f"w{i}", w))
            items.append((f"b{i}", b))
        items.append(("phi", self.phi))
        items.append(("phi_b", self.phi_bias))
        return items


def _forward_cached(model: EncoderModel, feats: np.ndarray):
    if feats.ndim != 2 or feats.shape[1] != model.in_dim:
        raise ShapeMismatch(f"features {feats.shape} vs model input dim {model.in_dim}")
    pre_acts = []
    h = feats
    hiddens = [h]
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w.T + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0)
        hiddens.append(h)
    raw = h @ model.weights[-1].T + model.biases[-1]
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    emb = raw / (norms + _NORM_EPS)
    logits = emb @ model.phi.T + model.phi_bias
    return emb, logits, (hiddens, pre_acts, raw, norms)


def forward(model: EncoderModel, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm embeddings and classifier logits for a feature matrix."""
    emb, logits, _ = _forward_cached(model, np.asarray(feats, dtype=np.float64))
    return emb, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LossResult:
    total: float
    ce: float
    proto: float
    grads: dict[str, np.ndarray]
    embeddings: np.ndarray


def combined_loss(
    model: EncoderModel,
    feats: np.ndarray,
    labels: np.ndarray,
    bank: PrototypeBank | None = None,
    proto_weight: float = 1.0,
    ce_weight: float = 1.0,
) -> LossResult:
    """Cross entropy plus (when a bank is present) the prototype
    similarity loss, with gradients for every model parameter.

    Ignore-labeled points contribute nothing; prototypes receive no
    gradient.  Raises EmptyBatch when no point is labeled.  ``ce_weight``
    exists for the prototype-only classifier ablation.
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{feats.shape[0]} feature rows vs {labels.shape[0]} labels")
    valid = labels != IGNORE_LABEL
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyBatch("batch contains only ignore-labeled points")
    lab = labels[valid]
    if lab.min() < 0 or lab.max() >= model.num_classes:
        raise ValidationError("labels outside class range")

    emb, logits, (hiddens, pre_acts, raw, norms) = _forward_cached(model, feats)

    probs = softmax(logits)
    row_idx = np.nonzero(valid)[0]
    ce = float(-np.log(np.maximum(probs[row_idx, lab], 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[row_idx, lab] -= 1.0
    dlogits[~valid] = 0.0
    dlogits *= ce_weight / n_valid

    proto = 0.0
    demb_extra = None
    use_bank = bank is not None and bool(bank.initialized.any())
    if use_bank:
        sims, best = _similarity_with_argmax(emb, bank)
        w = softmax(sims)
        proto = float(-np.log(np.maximum(w[row_idx, lab], 1e-300)).mean())
        ds = w.copy()
        ds[row_idx, lab] -= 1.0
        ds[~valid] = 0.0
        ds *= proto_weight / n_valid
        demb_extra = np.zeros_like(emb)
        for c in np.nonzero(bank.initialized)[0]:
            demb_extra += ds[:, c : c + 1] * bank.prototypes[c][best[:, c]]

    grads: dict[str, np.ndarray] = {}
    grads["phi"] = dlogits.T @ emb
    grads["phi_b"] = dlogits.sum(axis=0)
    demb = dlogits @ model.phi
    if demb_extra is not None:
        demb = demb + demb_extra

    # through L2 normalization: e = r / (|r| + eps); the curvature term
    # vanishes with r, so zero rows keep a well-defined gradient
    inv = 1.0 / (norms + _NORM_EPS)
    dot = np.einsum("nd,nd->n", raw, demb)[:, None]
    scale = np.where(norms > 1e-150, dot * inv * inv / np.maximum(norms, 1e-150), 0.0)
    draw = demb * inv - raw * scale

    upstream = draw
    last = len(model.weights) - 1
    grads[f"w{last}"] = upstream.T @ hiddens[-1]
    grads[f"b{last}"] = upstream.sum(axis=0)
    for i in range(last - 1, -1, -1):
        upstream = (upstream @ model.weights[i + 1]) * (pre_acts[i] > 0)
        grads[f"w{i}"] = upstream.T @ hiddens[i]
        grads[f"b{i}"] = upstream.sum(axis=0)

    total = ce_weight * ce + proto_weight * proto
    return LossResult(total, ce, proto, grads, emb)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """Adaptive-moment optimizer with decoupled weight decay and a
    polynomial learning-rate schedule."""

    total_steps: int
    base_lr: float = 6e-4
    weight_decay: float = 0.01
    poly_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError("total_steps must be >= 1")


def learning_rate(opt: OptimState, step: int | None = None) -> float:
    """lr(step) = base_lr * (1 - step / total_steps) ** poly_power."""
    s = opt.step if step is None else step
    frac = max(0.0, 1.0 - s / opt.total_steps)
    return opt.base_lr * frac**opt.poly_power


def optimizer_step(model: EncoderModel, grads: dict[str, np.ndarray], opt: OptimState) -> None:
    """One in-place parameter update."""
    if opt.step >= opt.total_steps:
        raise ValidationError(f"step {opt.step} exceeds total_steps {opt.total_steps}")
    lr = learning_rate(opt)
    opt.step += 1
    t = opt.step
    bias1 = 1.0 - opt.beta1**t
    bias2 = 1.0 - opt.beta2**t
    for name, param in model.param_items():
        g = grads[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(param)
        v = opt.v.get(name)
        if v is None:
            v = opt.v[name] = np.zeros_like(param)
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
        param -= lr * (update + opt.weight_decay * param)


# ---------------------------------------------------------------------------
# serialization


def save_model(model: EncoderModel, path: str | Path) -> None:
    """Versioned little-endian dump of every parameter with its shape."""
    arrays = model.param_items()
    parts = [struct.pack("<4sIII", _MODEL_MAGIC, _MODEL_VERSION, model.knn, len(arrays))]
    for name, arr in arrays:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise IoFailure(f"cannot write model to {path}: {exc}") from exc


def load_model(path: str | Path) -> EncoderModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read model from {path}: {exc}") from exc
    off = struct.calcsize("<4sIII")
    if len(blob) < off:
        raise ValidationError(f"{path}: truncated model file")
    magic, version, knn, n_arrays = struct.unpack_from("<4sIII", blob)
    if magic != _MODEL_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != _MODEL_VERSION:
        raise ValidationError(f"{path}: unsupported model version {version}")
    arrays: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("ascii")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += 8 * count
        arrays[name] = arr.astype(np.float64).reshape(shape)
        order.append(name)
    n_layers = sum(1 for name in order if name.startswith("w"))
    try:
        weights = [arrays[f"w{i}"] for i in range(n_layers)]
        biases = [arrays[f"b{i}"] for i in range(n_layers)]
        return EncoderModel(weights, biases, arrays["phi"], arrays["phi_b"], knn)
    except KeyError as exc:
        raise ValidationError(f"{path}: missing parameter {exc}") from exc
