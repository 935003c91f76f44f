import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgseg3d.errors import (
    EmptyCloud,
    FieldCountMismatch,
    InvalidClassId,
    IoFailure,
    LabelOutOfRange,
    MalformedHeader,
)
from dgseg3d.scene import (
    Aabb,
    IGNORE_LABEL,
    NUM_CLASSES,
    PointCloud,
    bounding_box,
    class_indices,
    load_manifest,
    load_scene,
    save_manifest,
    save_scene,
)


def _write(path, text):
    path.write_text(text)
    return path


def test_load_minimal_valid_file(tmp_path):
    path = _write(
        tmp_path / "a.ipc1",
        "ipc1\npoints 3\nfields x y z label\n0 0 0 0\n1.5 2 3 1\n-1 0.25 9 2\n",
    )
    pc = load_scene(path)
    assert len(pc) == 3
    assert pc.labels.tolist() == [0, 1, 2]
    assert pc.colors is None
    np.testing.assert_allclose(pc.positions[1], [1.5, 2.0, 3.0])


def test_load_with_colors(tmp_path):
    path = _write(
        tmp_path / "c.ipc1",
        "ipc1\npoints 2\nfields x y z r g b label\n0 0 0 255 0 10 7\n1 1 1 0 128 255 255\n",
    )
    pc = load_scene(path)
    assert pc.colors is not None
    assert pc.colors.tolist() == [[255, 0, 10], [0, 128, 255]]
    assert pc.labels.tolist() == [7, IGNORE_LABEL]


def test_header_count_mismatch(tmp_path):
    path = _write(
        tmp_path / "bad.ipc1",
        "ipc1\npoints 5\nfields x y z label\n0 0 0 0\n1 1 1 1\n2 2 2 2\n3 3 3 3\n",
    )
    with pytest.raises(FieldCountMismatch):
        load_scene(path)


def test_record_width_mismatch_names_line(tmp_path):
    path = _write(
        tmp_path / "bad.ipc1",
        "ipc1\npoints 2\nfields x y z label\n0 0 0 0\n1 1 1\n",
    )
    with pytest.raises(FieldCountMismatch, match=":5"):
        load_scene(path)


def test_label_out_of_range(tmp_path):
    path = _write(tmp_path / "bad.ipc1", "ipc1\npoints 1\nfields x y z label\n0 0 0 9\n")
    with pytest.raises(LabelOutOfRange):
        load_scene(path)


def test_non_finite_coordinate(tmp_path):
    from dgseg3d.errors import NonFiniteCoordinate

    path = _write(tmp_path / "bad.ipc1", "ipc1\npoints 1\nfields x y z label\nnan 0 0 1\n")
    with pytest.raises(NonFiniteCoordinate):
        load_scene(path)


def test_bad_magic_and_fields(tmp_path):
    with pytest.raises(MalformedHeader):
        load_scene(_write(tmp_path / "a.ipc1", "nope\npoints 1\nfields x y z label\n0 0 0 0\n"))
    with pytest.raises(MalformedHeader):
        load_scene(_write(tmp_path / "b.ipc1", "ipc1\npoints 1\nfields x y w label\n0 0 0 0\n"))


def test_roundtrip_single_point(tmp_path):
    pc = PointCloud(np.array([[0.123456789, -2.0, 7.5]]), np.array([3]))
    path = tmp_path / "one.ipc1"
    save_scene(pc, path)
    back = load_scene(path)
    assert back.labels.tolist() == [3]
    np.testing.assert_allclose(back.positions, pc.positions, atol=1e-6)


def test_roundtrip_10k_random_points(tmp_path):
    rng = np.random.default_rng(7)
    pc = PointCloud(
        rng.uniform(-50, 50, size=(10_000, 3)),
        rng.choice([0, 1, 2, 3, 4, 5, 6, 7, IGNORE_LABEL], size=10_000),
        rng.integers(0, 256, size=(10_000, 3)),
    )
    path = tmp_path / "big.ipc1"
    save_scene(pc, path)
    back = load_scene(path)
    assert np.array_equal(back.labels, pc.labels)
    assert np.array_equal(back.colors, pc.colors)
    # repr printing gives bit-exact floats
    assert np.array_equal(back.positions, pc.positions)


def test_save_unwritable_path(tmp_path):
    pc = PointCloud(np.zeros((1, 3)), np.array([0]))
    with pytest.raises(IoFailure):
        save_scene(pc, tmp_path)  # a directory is not writable as a file


def test_load_missing_file(tmp_path):
    with pytest.raises(IoFailure):
        load_scene(tmp_path / "missing.ipc1")


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.floats(-1e9, 1e9, allow_nan=False, allow_infinity=False, width=64),
            st.floats(-1e9, 1e9, allow_nan=False, allow_infinity=False, width=64),
            st.floats(-1e9, 1e9, allow_nan=False, allow_infinity=False, width=64),
            st.sampled_from(list(range(8)) + [IGNORE_LABEL]),
        ),
        min_size=1,
        max_size=40,
    )
)
def test_roundtrip_property(tmp_path_factory, records):
    positions = np.array([r[:3] for r in records])
    labels = np.array([r[3] for r in records])
    pc = PointCloud(positions, labels)
    path = tmp_path_factory.mktemp("rt") / "pc.ipc1"
    save_scene(pc, path)
    back = load_scene(path)
    assert len(back) == len(pc)
    assert np.array_equal(back.labels, pc.labels)
    assert np.all(np.abs(back.positions - pc.positions) <= 1e-6)


def test_class_indices_basic():
    pc = PointCloud(np.zeros((3, 3)), np.array([1, 2, 2]))
    assert class_indices(pc, 2).tolist() == [1, 2]
    assert class_indices(pc, 5).tolist() == []
    pc2 = PointCloud(np.zeros((2, 3)), np.array([1, 1]))
    assert class_indices(pc2, 2).tolist() == []


def test_class_indices_invalid_class():
    pc = PointCloud(np.zeros((2, 3)), np.array([1, 1]))
    with pytest.raises(InvalidClassId):
        class_indices(pc, 8)
    with pytest.raises(InvalidClassId):
        class_indices(pc, -1)


def test_class_indices_matches_linear_scan():
    rng = np.random.default_rng(11)
    labels = rng.choice([0, 1, 2, 3, 4, 5, 6, 7, IGNORE_LABEL], size=1000)
    pc = PointCloud(rng.normal(size=(1000, 3)), labels)
    for c in range(NUM_CLASSES):
        expected = [i for i, lab in enumerate(labels.tolist()) if lab == c]
        assert class_indices(pc, c).tolist() == expected


def test_class_indices_partition():
    rng = np.random.default_rng(3)
    labels = rng.choice([0, 1, 2, 3, 4, 5, 6, 7, IGNORE_LABEL], size=500)
    pc = PointCloud(rng.normal(size=(500, 3)), labels)
    seen = np.zeros(500, dtype=int)
    for c in range(NUM_CLASSES):
        seen[class_indices(pc, c)] += 1
    seen[labels == IGNORE_LABEL] += 1
    assert np.all(seen == 1)


def test_bounding_box():
    pc = PointCloud(np.array([[0.0, 0, 0], [1, 2, 3]]), np.array([0, 0]))
    box = bounding_box(pc)
    assert box.lo.tolist() == [0, 0, 0]
    assert box.hi.tolist() == [1, 2, 3]
    single = PointCloud(np.array([[4.0, -5, 6]]), np.array([1]))
    sbox = bounding_box(single)
    assert np.array_equal(sbox.lo, sbox.hi)


def test_bounding_box_matches_fold():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 3))
    pc = PointCloud(pts, np.zeros(100, dtype=int))
    lo = [min(pts[i][d] for i in range(100)) for d in range(3)]
    hi = [max(pts[i][d] for i in range(100)) for d in range(3)]
    box = bounding_box(pc)
    np.testing.assert_allclose(box.lo, lo)
    np.testing.assert_allclose(box.hi, hi)


def test_aabb_validation():
    with pytest.raises(ValueError):
        Aabb(np.array([1.0, 0, 0]), np.array([0.0, 1, 1]))


def test_pointcloud_validation():
    with pytest.raises(EmptyCloud):
        PointCloud(np.zeros((0, 3)), np.zeros(0, dtype=int))
    with pytest.raises(LabelOutOfRange):
        PointCloud(np.zeros((1, 3)), np.array([42]))
    pc = PointCloud(np.zeros((1, 3)), np.array([0]))
    with pytest.raises(ValueError):
        pc.positions[0, 0] = 1.0  # immutable storage


def test_manifest_roundtrip(tmp_path):
    splits = {"train": ["a.ipc1", "b.ipc1"], "val": []}
    save_manifest(tmp_path, splits)
    assert load_manifest(tmp_path) == splits
