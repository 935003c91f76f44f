import numpy as np
import pytest

from dgseg3d.errors import ValidationError
from dgseg3d.scene import (
    BOOKSHELF,
    CHAIR,
    FLOOR,
    NUM_CLASSES,
    SOFA,
    TABLE,
    load_manifest,
    load_scene,
)
from dgseg3d.synthgen import (
    DatasetConfig,
    SceneStyle,
    generate_dataset,
    generate_scene,
    source_clean_style,
    style_by_name,
    target_real_style,
)

TINY_SOURCE = SceneStyle(name="source_clean", density=40.0, furniture_density_boost=4.0, room_side=(3.0, 3.4))


def test_source_scene_contains_every_class():
    pc = generate_scene(source_clean_style(), np.random.default_rng(0))
    assert set(np.unique(pc.labels)) == set(range(NUM_CLASSES))


def test_target_smaller_than_source_over_seeds():
    for seed in range(10):
        n_src = len(generate_scene(source_clean_style(), np.random.default_rng(seed)))
        n_tgt = len(generate_scene(target_real_style(), np.random.default_rng(seed)))
        assert n_tgt < n_src


def test_source_furniture_rests_on_floor():
    pc = generate_scene(source_clean_style(), np.random.default_rng(1))
    floor_z = np.median(pc.positions[pc.labels == FLOOR, 2])
    assert floor_z == 0.0
    for class_id in (CHAIR, SOFA, TABLE, BOOKSHELF):
        min_z = pc.positions[pc.labels == class_id, 2].min()
        assert abs(min_z - floor_z) <= 1e-6


def test_scene_determinism():
    a = generate_scene(target_real_style(), np.random.default_rng(7))
    b = generate_scene(target_real_style(), np.random.default_rng(7))
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.labels, b.labels)


def test_style_validation():
    with pytest.raises(ValidationError):
        SceneStyle(name="x", density=0.0)
    with pytest.raises(ValidationError):
        SceneStyle(name="x", density=10.0, layout_regularity=1.5)
    with pytest.raises(ValidationError):
        style_by_name("bogus")


def test_generate_dataset_files_and_manifest(tmp_path):
    cfg = DatasetConfig(train=10, val=5, test=0, source_style=TINY_SOURCE)
    splits = generate_dataset(cfg, tmp_path, seed=1)
    assert len(splits["train"]) == 10
    assert len(splits["val"]) == 5
    assert splits["test"] == []
    manifest = load_manifest(tmp_path)
    assert manifest == splits
    files = sorted(p.name for p in tmp_path.glob("*.ipc1"))
    assert len(files) == 15
    pc = load_scene(tmp_path / splits["train"][0])
    assert len(pc) > 100


def test_generate_dataset_byte_identical_replay(tmp_path):
    cfg = DatasetConfig(train=2, val=1, test=1, source_style=TINY_SOURCE)
    a_dir = tmp_path / "a"
    b_dir = tmp_path / "b"
    generate_dataset(cfg, a_dir, seed=3)
    generate_dataset(cfg, b_dir, seed=3)
    for name in sorted(p.name for p in a_dir.iterdir()):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()


def test_generate_dataset_zero_counts(tmp_path):
    splits = generate_dataset(DatasetConfig(train=0, val=0, test=0), tmp_path, seed=0)
    assert splits == {"train": [], "val": [], "test": []}
    assert load_manifest(tmp_path) == splits


def test_dataset_config_validation():
    with pytest.raises(ValidationError):
        DatasetConfig(train=-1)
