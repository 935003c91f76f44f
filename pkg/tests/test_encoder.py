import math

import numpy as np
import pytest

from dgseg3d.encoder import (
    EncoderModel,
    FEATURE_DIM,
    OptimState,
    combined_loss,
    extract_point_features,
    forward,
    learning_rate,
    load_model,
    optimizer_step,
    save_model,
    softmax,
)
from dgseg3d.errors import EmptyBatch, ShapeMismatch, ValidationError
from dgseg3d.prototypes import PrototypeBank
from dgseg3d.scene import IGNORE_LABEL, NUM_CLASSES, PointCloud


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _small_model(seed, in_dim=6, hidden=(8, 6), embed=4):
    return EncoderModel.init(
        np.random.default_rng(seed), in_dim=in_dim, hidden_dims=hidden, embed_dim=embed
    )


# ---------------------------------------------------------------------------
# features


def test_features_single_point():
    pc = PointCloud(np.array([[3.0, -1.0, 2.0]]), np.array([0]))
    feats = extract_point_features(pc, k=16)
    np.testing.assert_allclose(feats, np.zeros((1, FEATURE_DIM)))


def test_features_translation_invariance_xy():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(300, 3))
    pc = PointCloud(pts, np.zeros(300, dtype=int))
    shifted = PointCloud(pts + np.array([12.0, -7.0, 0.0]), np.zeros(300, dtype=int))
    np.testing.assert_allclose(
        extract_point_features(pc, 12), extract_point_features(shifted, 12), atol=1e-9
    )


def test_features_planar_patch_smallest_eigendescriptor_zero():
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0, 1, 500), rng.uniform(0, 1, 500), np.zeros(500)])
    feats = extract_point_features(PointCloud(pts, np.zeros(500, dtype=int)), 16)
    assert np.all(np.abs(feats[:, 9]) < 1e-6)  # smallest normalized eigenvalue
    assert np.all(np.diff(feats[:, 7:10], axis=1) <= 1e-12)  # sorted descending


def test_features_height_above_floor():
    pts = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 3.0]])
    feats = extract_point_features(PointCloud(pts, np.zeros(2, dtype=int)), 1)
    np.testing.assert_allclose(feats[:, 3], [0.0, 2.0])


# ---------------------------------------------------------------------------
# forward


def test_forward_embeddings_unit_norm():
    rng = np.random.default_rng(2)
    model = _small_model(0)
    emb, logits = forward(model, rng.normal(size=(40, 6)))
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)
    assert logits.shape == (40, NUM_CLASSES)


def test_forward_zero_weights_gives_bias_logits():
    model = _small_model(0)
    for w in model.weights:
        w[:] = 0.0
    for b in model.biases:
        b[:] = 0.0
    model.phi[:] = 0.0
    model.phi_bias[:] = np.arange(NUM_CLASSES, dtype=np.float64)
    _, logits = forward(model, np.random.default_rng(3).normal(size=(5, 6)))
    np.testing.assert_allclose(logits, np.tile(np.arange(NUM_CLASSES), (5, 1)))


def test_forward_permutation_equivariant():
    rng = np.random.default_rng(4)
    model = _small_model(1)
    feats = rng.normal(size=(30, 6))
    perm = rng.permutation(30)
    emb, logits = forward(model, feats)
    emb_p, logits_p = forward(model, feats[perm])
    np.testing.assert_allclose(emb_p, emb[perm], atol=1e-12)
    np.testing.assert_allclose(logits_p, logits[perm], atol=1e-12)


def test_forward_shape_mismatch():
    model = _small_model(0)
    with pytest.raises(ShapeMismatch):
        forward(model, np.zeros((3, 9)))


# ---------------------------------------------------------------------------
# loss


def test_ce_uniform_logits_is_log_num_classes():
    model = _small_model(0)
    for w in model.weights:
        w[:] = 0.0
    model.phi[:] = 0.0
    model.phi_bias[:] = 0.0
    labels = np.random.default_rng(5).integers(0, NUM_CLASSES, size=16)
    result = combined_loss(model, np.random.default_rng(6).normal(size=(16, 6)), labels)
    assert result.ce == pytest.approx(math.log(NUM_CLASSES), rel=1e-12)
    assert result.proto == 0.0


def test_ce_confident_model_near_zero():
    model = _small_model(0)
    for w in model.weights:
        w[:] = 0.0
    model.phi[:] = 0.0
    model.phi_bias[:] = -50.0
    model.phi_bias[3] = 50.0
    labels = np.full(10, 3)
    result = combined_loss(model, np.random.default_rng(7).normal(size=(10, 6)), labels)
    assert result.ce == pytest.approx(0.0, abs=1e-12)


def test_loss_ignores_255():
    rng = np.random.default_rng(8)
    model = _small_model(2)
    feats = rng.normal(size=(12, 6))
    labels = rng.integers(0, NUM_CLASSES, size=12)
    ignored = labels.copy()
    ignored[5] = IGNORE_LABEL
    kept = np.delete(np.arange(12), 5)
    a = combined_loss(model, feats[kept], labels[kept])
    b = combined_loss(model, feats, ignored)
    assert b.ce == pytest.approx(a.ce, rel=1e-12)
    for name in a.grads:
        np.testing.assert_allclose(b.grads[name], a.grads[name], atol=1e-12)


def test_loss_empty_batch():
    model = _small_model(0)
    with pytest.raises(EmptyBatch):
        combined_loss(model, np.zeros((3, 6)), np.full(3, IGNORE_LABEL))


def _random_bank(rng, k, d):
    protos = np.array([_unit_rows(rng, k, d) for _ in range(NUM_CLASSES)])
    return PrototypeBank(protos, np.ones(NUM_CLASSES, dtype=bool))


def _flat_params(model):
    for name, param in model.param_items():
        flat = param.ravel()
        for i in range(flat.size):
            yield name, param, i


def _fd_check(model, feats, labels, bank, proto_weight=1.0, h=1e-4):
    """Max relative error between analytic gradients and central finite
    differences over every parameter."""
    result = combined_loss(model, feats, labels, bank, proto_weight)
    worst = 0.0
    for name, param, i in _flat_params(model):
        flat = param.ravel()
        keep = flat[i]
        flat[i] = keep + h
        up = combined_loss(model, feats, labels, bank, proto_weight).total
        flat[i] = keep - h
        down = combined_loss(model, feats, labels, bank, proto_weight).total
        flat[i] = keep
        fd = (up - down) / (2 * h)
        an = result.grads[name].ravel()[i]
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        worst = max(worst, err)
    return worst


def _well_conditioned_case(seed, with_bank):
    """Random small model/batch, re-drawn until no ReLU pre-activation or
    prototype argmax sits close enough to a kink to corrupt the finite
    differences."""
    from dgseg3d.encoder import _forward_cached
    from dgseg3d.prototypes import _similarity_with_argmax

    for attempt in range(50):
        rng = np.random.default_rng(1000 * seed + attempt)
        model = _small_model(rng.integers(1 << 30))
        feats = rng.normal(size=(12, 6))
        labels = rng.integers(0, NUM_CLASSES, size=12)
        labels[0] = IGNORE_LABEL
        emb, _, (hiddens, pre_acts, raw, norms) = _forward_cached(model, feats)
        if min(np.abs(z).min() for z in pre_acts) < 5e-3:
            continue
        bank = None
        if with_bank:
            bank = _random_bank(rng, 3, model.embed_dim)
            per_proto = emb @ bank.prototypes.reshape(-1, model.embed_dim).T
            per_proto = per_proto.reshape(12, NUM_CLASSES, 3)
            top2 = np.sort(per_proto, axis=2)[:, :, -2:]
            if np.min(top2[:, :, 1] - top2[:, :, 0]) < 1e-3:
                continue
        return model, feats, labels, bank
    raise RuntimeError("no well-conditioned case found")


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences_ce_only(seed):
    model, feats, labels, _ = _well_conditioned_case(seed, with_bank=False)
    assert _fd_check(model, feats, labels, None) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences_with_prototypes(seed):
    model, feats, labels, bank = _well_conditioned_case(seed, with_bank=True)
    assert _fd_check(model, feats, labels, bank) < 1e-4


def test_no_gradient_flows_into_bank():
    rng = np.random.default_rng(9)
    model, feats, labels, bank = _well_conditioned_case(5, with_bank=True)
    before = bank.prototypes.copy()
    combined_loss(model, feats, labels, bank)
    assert np.array_equal(bank.prototypes, before)


# ---------------------------------------------------------------------------
# optimizer


def test_optimizer_zero_grads_zero_decay_is_noop():
    model = _small_model(3)
    before = {name: p.copy() for name, p in model.param_items()}
    opt = OptimState(total_steps=10, weight_decay=0.0)
    grads = {name: np.zeros_like(p) for name, p in model.param_items()}
    optimizer_step(model, grads, opt)
    for name, p in model.param_items():
        assert np.array_equal(p, before[name])


def test_learning_rate_schedule_endpoints_and_closed_form():
    opt = OptimState(total_steps=1000)
    assert learning_rate(opt, 0) == pytest.approx(6e-4, rel=1e-12)
    assert learning_rate(opt, 1000) == 0.0
    for step in (1, 17, 400, 999):
        want = 6e-4 * (1 - step / 1000) ** 0.9
        assert learning_rate(opt, step) == pytest.approx(want, rel=1e-12)


def test_optimizer_rejects_steps_past_schedule():
    model = _small_model(0)
    opt = OptimState(total_steps=1)
    grads = {name: np.zeros_like(p) for name, p in model.param_items()}
    optimizer_step(model, grads, opt)
    with pytest.raises(ValidationError):
        optimizer_step(model, grads, opt)


class _Scalar:
    def __init__(self, value):
        self.value = np.array([value])

    def param_items(self):
        return [("p", self.value)]


def test_optimizer_converges_on_quadratic():
    target = 3.0
    scalar = _Scalar(0.0)
    opt = OptimState(total_steps=500, base_lr=0.05, weight_decay=0.0)
    for _ in range(500):
        grads = {"p": scalar.value - target}
        optimizer_step(scalar, grads, opt)
    assert abs(scalar.value[0] - target) < 1e-3


# ---------------------------------------------------------------------------
# serialization


def test_model_roundtrip(tmp_path):
    model = _small_model(4)
    path = tmp_path / "model.bin"
    save_model(model, path)
    assert path.read_bytes()[:4] == b"PENC"
    back = load_model(path)
    assert back.knn == model.knn
    for (name_a, a), (name_b, b) in zip(model.param_items(), back.param_items()):
        assert name_a == name_b
        assert np.array_equal(a, b)


def test_model_load_rejects_garbage(tmp_path):
    path = tmp_path / "model.bin"
    path.write_bytes(b"XXXX" + b"\0" * 30)
    with pytest.raises(ValidationError):
        load_model(path)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(10)
    p = softmax(rng.normal(size=(20, 8)) * 50)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0)
