"""Procedural generator of labeled desk-scale indoor scenes.

Two domain styles share the same primitive vocabulary (rectangular room,
box furniture, wall-embedded door/window rectangles) but differ along
the two axes that separate clean synthetic data from real scans: layout
(grid-regular vs cluttered, rotated, overlapping, size-varied) and point
pattern (dense and complete vs sparse, occluded, and noisy).  Labels are
correct by construction because every point is sampled from a primitive
of known class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyResult, IoFailure, ValidationError
from .pattern_aug import ScanSimParams, virtual_scan
from .scene import (
    BOOKSHELF,
    CHAIR,
    DOOR,
    FLOOR,
    SOFA,
    TABLE,
    WALL,
    WINDOW,
    PointCloud,
    save_manifest,
    save_scene,
)

WALL_HEIGHT = 2.5


@dataclass(frozen=True)
class SceneStyle:
    """Knobs controlling one domain's look."""

    name: str
    density: float  # surface samples per m² for walls and floor
    furniture_density_boost: float = 9.0
    layout_regularity: float = 1.0  # 1 = grid aligned, 0 = fully random
    clutter_range: tuple[int, int] = (0, 0)  # extra furniture pieces
    size_jitter: float = 0.05
    tucked_chairs: tuple[int, int] = (0, 0)  # chairs pushed against the table
    room_side: tuple[float, float] = (3.6, 4.6)
    apply_scan_sim: bool = False
    scan: ScanSimParams = field(default_factory=ScanSimParams)

    def __post_init__(self):
        if self.density <= 0:
            raise ValidationError("density must be > 0")
        if not (0.0 <= self.layout_regularity <= 1.0):
            raise ValidationError("layout_regularity must lie in [0, 1]")


def source_clean_style(density: float = 100.0) -> SceneStyle:
    # furniture is sampled much denser than structure so the default
    # DBSCAN threshold (100 neighbors within 0.2 m) finds instances
    return SceneStyle(name="source_clean", density=density)


def target_real_style(density: float = 68.0) -> SceneStyle:
    return SceneStyle(
        name="target_real",
        density=density,
        layout_regularity=0.15,
        clutter_range=(3, 7),
        size_jitter=0.25,
        tucked_chairs=(1, 2),
        room_side=(3.6, 5.0),
        apply_scan_sim=True,
        scan=ScanSimParams(num_cameras=3, noise_sigma=0.012, keep_prob=0.9),
    )


def style_by_name(name: str) -> SceneStyle:
    if name == "source_clean":
        return source_clean_style()
    if name == "target_real":
        return target_real_style()
    raise ValidationError(f"unknown scene style {name!r}")


# ---------------------------------------------------------------------------
# surface sampling primitives


def _sample_rect(rng, corner, edge_u, edge_v, density) -> np.ndarray:
    """Uniform samples on a planar rectangle spanned by two edges."""
    area = np.linalg.norm(np.cross(edge_u, edge_v))
    count = max(1, int(np.ceil(area * density)))
    u = rng.random(count)[:, None]
    v = rng.random(count)[:, None]
    return corner + u * edge_u + v * edge_v


def _sample_box(rng, lo, hi, density) -> np.ndarray:
    """Samples on all six faces of an axis-aligned box; every face gets
    at least one point so box extremes (e.g. leg bottoms) are covered."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    faces = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        edge_u = np.zeros(3)
        edge_u[u_axis] = ext[u_axis]
        edge_v = np.zeros(3)
        edge_v[v_axis] = ext[v_axis]
        for offset in (0.0, ext[axis]):
            corner = lo.copy()
            corner[axis] += offset
            faces.append(_sample_rect(rng, corner, edge_u, edge_v, density))
    return np.concatenate(faces)


def _rot_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    out = points.copy()
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


# ---------------------------------------------------------------------------
# furniture: boxes in a local frame with the footprint center at the
# origin and the lowest face on z = 0


def _chair_boxes(scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    a = 0.23 * scale
    seat_h = 0.42 * scale
    boxes = [
        (np.array([-a, -a, seat_h - 0.05]), np.array([a, a, seat_h])),  # seat
        (np.array([-a, a - 0.05, seat_h]), np.array([a, a, seat_h + 0.45 * scale])),  # back
    ]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (a - 0.03), sy * (a - 0.03)
            boxes.append(
                (np.array([cx - 0.025, cy - 0.025, 0.0]), np.array([cx + 0.025, cy + 0.025, seat_h - 0.05]))
            )
    return boxes


def _table_boxes(scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    hx, hy = 0.60 * scale, 0.38 * scale
    top_h = 0.72 * scale
    boxes = [(np.array([-hx, -hy, top_h - 0.05]), np.array([hx, hy, top_h]))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (hx - 0.06), sy * (hy - 0.06)
            boxes.append(
                (np.array([cx - 0.03, cy - 0.03, 0.0]), np.array([cx + 0.03, cy + 0.03, top_h - 0.05]))
            )
    return boxes


def _sofa_boxes(scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    hx, hy = 0.72 * scale, 0.33 * scale
    return [
        (np.array([-hx, -hy, 0.0]), np.array([hx, hy, 0.40 * scale])),  # body
        (np.array([-hx, hy - 0.10, 0.40 * scale]), np.array([hx, hy, 0.80 * scale])),  # back
        (np.array([-hx, -hy, 0.40 * scale]), np.array([-hx + 0.12, hy, 0.58 * scale])),
        (np.array([hx - 0.12, -hy, 0.40 * scale]), np.array([hx, hy, 0.58 * scale])),
    ]


def _bookshelf_boxes(scale: float) -> list[tuple[np.ndarray, np.ndarray]]:
    hx, hy = 0.36 * scale, 0.14 * scale
    return [(np.array([-hx, -hy, 0.0]), np.array([hx, hy, 1.6 * scale]))]


_FURNITURE_BUILDERS = {
    CHAIR: _chair_boxes,
    TABLE: _table_boxes,
    SOFA: _sofa_boxes,
    BOOKSHELF: _bookshelf_boxes,
}

# conservative xy half-extent per unit scale, for wall margins
_FURNITURE_RADIUS = {CHAIR: 0.33, TABLE: 0.71, SOFA: 0.80, BOOKSHELF: 0.39}


def _sample_furniture(rng, class_id, scale, position, angle, density) -> np.ndarray:
    pts = []
    for lo, hi in _FURNITURE_BUILDERS[class_id](scale):
        pts.append(_sample_box(rng, lo, hi, density))
    local = np.concatenate(pts)
    world = _rot_z(local, angle)
    world[:, 0] += position[0]
    world[:, 1] += position[1]
    return world


# ---------------------------------------------------------------------------
# scene assembly


def _wall_points(rng, width, depth, density, door_wall, window_wall):
    """Four walls with door/window rectangles cut out and sampled with
    their own labels."""

    # wall index: 0 west (x=0), 1 east (x=W), 2 south (y=0), 3 north (y=D)
    def to_world(wall, u, z):
        if wall == 0:
            return np.column_stack([np.zeros_like(u), u, z])
        if wall == 1:
            return np.column_stack([np.full_like(u, width), u, z])
        if wall == 2:
            return np.column_stack([u, np.zeros_like(u), z])
        return np.column_stack([u, np.full_like(u, depth), z])

    lengths = [depth, depth, width, width]
    door_w, door_h = 0.9, 2.0
    win_w, win_z0, win_z1 = 1.2, 0.9, 1.9
    holes = {
        door_wall: (lengths[door_wall] / 2 - door_w / 2, lengths[door_wall] / 2 + door_w / 2, 0.0, door_h),
        window_wall: (lengths[window_wall] / 2 - win_w / 2, lengths[window_wall] / 2 + win_w / 2, win_z0, win_z1),
    }

    parts = []
    for wall in range(4):
        length = lengths[wall]
        count = max(1, int(np.ceil(length * WALL_HEIGHT * density)))
        u = rng.random(count) * length
        z = rng.random(count) * WALL_HEIGHT
        if wall in holes:
            u0, u1, z0, z1 = holes[wall]
            keep = ~((u >= u0) & (u <= u1) & (z >= z0) & (z <= z1))
            u, z = u[keep], z[keep]
        parts.append((to_world(wall, u, z), WALL))

    u0, u1, z0, z1 = holes[door_wall]
    count = max(1, int(np.ceil((u1 - u0) * (z1 - z0) * density)))
    u = u0 + rng.random(count) * (u1 - u0)
    z = z0 + rng.random(count) * (z1 - z0)
    parts.append((to_world(door_wall, u, z), DOOR))

    u0, u1, z0, z1 = holes[window_wall]
    count = max(1, int(np.ceil((u1 - u0) * (z1 - z0) * density)))
    u = u0 + rng.random(count) * (u1 - u0)
    z = z0 + rng.random(count) * (z1 - z0)
    parts.append((to_world(window_wall, u, z), WINDOW))
    return parts


def generate_scene(style: SceneStyle, rng: np.random.Generator) -> PointCloud:
    """One labeled room in the given style; contains every class."""
    width = float(rng.uniform(*style.room_side))
    depth = float(rng.uniform(*style.room_side))
    reg = style.layout_regularity
    jitter = (1.0 - reg) * 0.35

    def draw_scale() -> float:
        return float(rng.uniform(1.0 - style.size_jitter, 1.0 + style.size_jitter))

    def draw_angle() -> float:
        return 0.0 if reg >= 0.5 else float(rng.uniform(0.0, 2.0 * np.pi))

    def jittered(x, y):
        return (
            float(np.clip(x + rng.uniform(-jitter, jitter), 0.35, width - 0.35)),
            float(np.clip(y + rng.uniform(-jitter, jitter), 0.35, depth - 0.35)),
        )

    def random_pos(class_id, scale):
        margin = min(_FURNITURE_RADIUS[class_id] * scale + 0.05, width / 2 - 0.05, depth / 2 - 0.05)
        return (
            float(rng.uniform(margin, width - margin)),
            float(rng.uniform(margin, depth - margin)),
        )

    parts: list[tuple[np.ndarray, int]] = []
    fdensity = style.density * style.furniture_density_boost

    # structure
    floor = _sample_rect(
        rng,
        np.zeros(3),
        np.array([width, 0.0, 0.0]),
        np.array([0.0, depth, 0.0]),
        style.density,
    )
    parts.append((floor, FLOOR))
    door_wall = int(rng.integers(4)) if reg < 0.5 else 0
    window_wall = int((door_wall + (int(rng.integers(3)) + 1 if reg < 0.5 else 3)) % 4)
    parts.extend(_wall_points(rng, width, depth, style.density, door_wall, window_wall))

    # base furniture set: one of each floor-standing class plus a second chair
    table_scale = draw_scale()
    table_angle = draw_angle()
    if reg >= 0.5:
        table_pos = jittered(width / 2, depth / 2)
    else:
        table_pos = random_pos(TABLE, table_scale)
    parts.append((_sample_furniture(rng, TABLE, table_scale, table_pos, table_angle, fdensity), TABLE))

    def place(class_id, pos, angle=None, scale=None):
        scale = draw_scale() if scale is None else scale
        angle = draw_angle() if angle is None else angle
        parts.append((_sample_furniture(rng, class_id, scale, pos, angle, fdensity), class_id))

    if reg >= 0.5:
        # chairs flank the table on the x axis, everything axis-aligned
        gap = 0.62 * table_scale + 0.45
        place(CHAIR, jittered(table_pos[0] - gap, table_pos[1]), angle=0.0)
        place(CHAIR, jittered(table_pos[0] + gap, table_pos[1]), angle=np.pi)
        place(SOFA, jittered(width / 2, 0.55), angle=0.0)
        # long side along the east wall
        place(BOOKSHELF, (width - 0.22, depth / 2), angle=np.pi / 2)
    else:
        for _ in range(2):
            scale = draw_scale()
            place(CHAIR, random_pos(CHAIR, scale), scale=scale)
        scale = draw_scale()
        place(SOFA, random_pos(SOFA, scale), scale=scale)
        scale = draw_scale()
        place(BOOKSHELF, random_pos(BOOKSHELF, scale), scale=scale)
        # chairs tucked against the table edge form multi-instance clusters
        lo, hi = style.tucked_chairs
        for _ in range(int(rng.integers(lo, hi + 1)) if hi > lo else lo):
            side = 1.0 if rng.random() < 0.5 else -1.0
            local = np.array([side * (0.62 * table_scale + 0.18), 0.0])
            c, s = np.cos(table_angle), np.sin(table_angle)
            offset = np.array([c * local[0] - s * local[1], s * local[0] + c * local[1]])
            pos = (
                float(np.clip(table_pos[0] + offset[0], 0.3, width - 0.3)),
                float(np.clip(table_pos[1] + offset[1], 0.3, depth - 0.3)),
            )
            place(CHAIR, pos, angle=table_angle + (np.pi if side > 0 else 0.0))

    # clutter: extra furniture anywhere, overlap allowed
    lo, hi = style.clutter_range
    clutter = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    choices = (CHAIR, TABLE, SOFA, BOOKSHELF)
    for _ in range(clutter):
        class_id = int(choices[rng.integers(len(choices))])
        scale = draw_scale()
        place(class_id, random_pos(class_id, scale), scale=scale)

    positions = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([np.full(p.shape[0], lab, dtype=np.int64) for p, lab in parts])
    pc = PointCloud(positions, labels)
    if style.apply_scan_sim:
        try:
            pc = virtual_scan(pc, style.scan, rng)
        except EmptyResult:
            pass  # keep the unscanned scene; practically unreachable
    return pc


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class DatasetConfig:
    train: int = 60
    val: int = 10
    test: int = 30
    source_style: SceneStyle = field(default_factory=source_clean_style)
    target_style: SceneStyle = field(default_factory=target_real_style)

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ValidationError("split counts must be >= 0")


_SPLIT_SALTS = {"train": 1, "val": 2, "test": 3}


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path, seed: int) -> dict[str, list[str]]:
    """Write IPC1 scenes plus manifest.json; fully determined by seed.

    train/val use the source style, test uses the target style.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create dataset dir {out_dir}: {exc}") from exc
    splits: dict[str, list[str]] = {}
    for split, count in (("train", cfg.train), ("val", cfg.val), ("test", cfg.test)):
        style = cfg.target_style if split == "test" else cfg.source_style
        names = []
        for i in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_SALTS[split], i]))
            pc = generate_scene(style, rng)
            name = f"{split}_{i:04d}.ipc1"
            save_scene(pc, out_dir / name)
            names.append(name)
        splits[split] = names
    save_manifest(out_dir, splits)
    return splits
