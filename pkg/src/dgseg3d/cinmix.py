"""Instance mixing between scenes.

The main augmentation extracts density-clustered instance groups of
floor-standing thing classes from a vendor scene and inserts them into a
client scene subject to two geometry constraints: every inserted group
stands exactly on the client floor, and its rasterized footprint never
overlaps occupied cells or previously inserted groups.  ``mix3d`` and
``cuboid_mix`` are simpler whole-scene baselines.

All cell bookkeeping is integer-exact: an instance's local origin is
always placed at a cell center, so the grid cells covered by its points
are a fixed offset set independent of which cell is chosen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import DbscanParams, dbscan
from .errors import EmptyResult, NoFloor, ValidationError
from .scene import FLOOR, MIXABLE_CLASSES, PointCloud, bounding_box, class_indices


@dataclass(frozen=True)
class InstanceGroup:
    """One density cluster of a single thing class, in its local frame.

    The local origin sits at the footprint centroid in xy and at the
    lowest point in z (min local z is 0).  ``footprint`` is the closed
    boolean raster of the unrotated xy silhouette at ``cell_size``.
    """

    points: np.ndarray
    class_id: int
    footprint: np.ndarray
    cell_size: float
    source: str = ""

    def __post_init__(self):
        if self.class_id not in MIXABLE_CLASSES:
            raise ValidationError(f"class {self.class_id} is not mixable")
        if not self.footprint.any():
            raise ValidationError("instance footprint is empty")


@dataclass
class FloorOccupancyGrid:
    """Boolean raster of placeable floor cells over a scene's xy box.

    origin: world xy of the corner of cell (0, 0); free has shape (W, H)
    indexed [ix, iy]; floor_z is the median z of the floor points.
    """

    origin: np.ndarray
    cell_size: float
    free: np.ndarray
    floor_z: float

    def copy(self) -> "FloorOccupancyGrid":
        return FloorOccupancyGrid(
            self.origin.copy(), self.cell_size, self.free.copy(), self.floor_z
        )


@dataclass(frozen=True)
class Placement:
    translation: np.ndarray
    rotation_z: float


@dataclass(frozen=True)
class MixConfig:
    cell_size: float = 0.10
    occupy_height: float = 2.0
    # None draws uniformly from {1, 2, 3, 4} per client scene.
    num_instances: int | None = None
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    cluster_subsample: int | None = None


# ---------------------------------------------------------------------------
# binary morphology on boolean rasters


def _shifted(data: np.ndarray, du: int, dv: int) -> np.ndarray:
    """data translated so out[i, j] = data[i + du, j + dv], False outside."""
    w, h = data.shape
    out = np.zeros_like(data)
    i0, i1 = max(0, -du), min(w, w - du)
    j0, j1 = max(0, -dv), min(h, h - dv)
    if i0 < i1 and j0 < j1:
        out[i0:i1, j0:j1] = data[i0 + du : i1 + du, j0 + dv : j1 + dv]
    return out


def binary_erode(data: np.ndarray, kernel: np.ndarray, anchor: tuple[int, int]) -> np.ndarray:
    """Erosion with explicit anchor: out[p] is True iff every occupied
    kernel cell q lands on a True cell at p + q - anchor (outside counts
    as False)."""
    out = np.ones_like(data)
    au, av = anchor
    for u, v in np.argwhere(kernel):
        out &= _shifted(data, int(u) - au, int(v) - av)
    return out


def _dilate3(data: np.ndarray) -> np.ndarray:
    out = data.copy()
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            if du or dv:
                out |= _shifted(data, du, dv)
    return out


def _close_1cell(data: np.ndarray) -> np.ndarray:
    """Morphological closing by a 3x3 block; fills single-cell pinholes."""
    padded = np.pad(data, 2)
    closed = binary_erode(_dilate3(padded), np.ones((3, 3), dtype=bool), (1, 1))
    return closed[2:-2, 2:-2] | data  # closing is extensive; keep exact originals


def footprint_anchor(footprint: np.ndarray) -> tuple[int, int]:
    """Cell nearest the centroid of the occupied cells."""
    occ = np.argwhere(footprint)
    if occ.size == 0:
        raise ValidationError("footprint is empty")
    center = np.floor(occ.mean(axis=0) + 0.5).astype(int)
    return int(center[0]), int(center[1])


def _footprint_offsets(xy: np.ndarray, cell_size: float) -> np.ndarray:
    """Closed footprint of the points as integer cell offsets, assuming
    the local origin sits at a cell center."""
    d = np.floor(xy / cell_size + 0.5).astype(np.int64)
    d = np.unique(d, axis=0)
    lo = d.min(axis=0) - 2
    hi = d.max(axis=0) + 2
    raster = np.zeros((hi[0] - lo[0] + 1, hi[1] - lo[1] + 1), dtype=bool)
    raster[d[:, 0] - lo[0], d[:, 1] - lo[1]] = True
    closed = _close_1cell(raster)
    return np.argwhere(closed) + lo


def _offsets_to_raster(offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raster + shift s such that raster[d + s] is True for each offset d."""
    lo = offsets.min(axis=0)
    hi = offsets.max(axis=0)
    raster = np.zeros((hi[0] - lo[0] + 1, hi[1] - lo[1] + 1), dtype=bool)
    raster[offsets[:, 0] - lo[0], offsets[:, 1] - lo[1]] = True
    return raster, -lo


# ---------------------------------------------------------------------------
# instance extraction and the floor occupancy grid


def extract_instance_groups(
    vendor: PointCloud,
    params: DbscanParams | None = None,
    cell_size: float = 0.10,
    cluster_subsample: int | None = None,
    rng: np.random.Generator | None = None,
    source: str = "",
) -> list[InstanceGroup]:
    """Cluster each mixable thing class of the vendor scene into groups.

    Every non-noise DBSCAN cluster becomes an InstanceGroup re-centered
    to its local frame.  ``cluster_subsample`` caps the per-class point
    count fed to DBSCAN (requires rng); the instance keeps full points.
    """
    params = params or DbscanParams()
    groups: list[InstanceGroup] = []
    for class_id in MIXABLE_CLASSES:
        idx = class_indices(vendor, class_id)
        if idx.size == 0:
            continue
        pts = vendor.positions[idx]
        if cluster_subsample is not None and idx.size > cluster_subsample:
            if rng is None:
                raise ValidationError("cluster_subsample requires an rng")
            keep = rng.choice(idx.size, size=cluster_subsample, replace=False)
            keep.sort()
            cluster_labels_sub = dbscan(pts[keep], params)
            # assign every point to the cluster of its nearest labeled point
            cluster_labels = _propagate_labels(pts, pts[keep], cluster_labels_sub)
        else:
            cluster_labels = dbscan(pts, params)
        for cid in range(int(cluster_labels.max()) + 1 if cluster_labels.size else 0):
            members = pts[cluster_labels == cid]
            offsets = _footprint_offsets(members[:, :2], cell_size)
            # local origin: centroid of the closed footprint cells, min z
            center_xy = (offsets.mean(axis=0)) * cell_size
            local = members - np.array([center_xy[0], center_xy[1], members[:, 2].min()])
            raster, _ = _offsets_to_raster(_footprint_offsets(local[:, :2], cell_size))
            groups.append(
                InstanceGroup(local, class_id, raster, cell_size, source=source)
            )
    return groups


def _propagate_labels(all_pts: np.ndarray, sub_pts: np.ndarray, sub_labels: np.ndarray) -> np.ndarray:
    from scipy.spatial import cKDTree

    _, nearest = cKDTree(sub_pts).query(all_pts, k=1)
    return sub_labels[nearest]


def build_floor_grid(
    client: PointCloud, cell_size: float = 0.10, occupy_height: float = 2.0
) -> FloorOccupancyGrid:
    """Raster of the client's xy box marking cells that are backed by
    floor points and unobstructed up to ``occupy_height`` above the
    floor.  Points of every non-floor label (including ignore) block."""
    if cell_size <= 0:
        raise ValidationError(f"cell_size must be > 0, got {cell_size}")
    floor_mask = client.labels == FLOOR
    if not floor_mask.any():
        raise NoFloor("client scene has no floor-labeled points")
    floor_z = float(np.median(client.positions[floor_mask, 2]))

    box = bounding_box(client)
    origin = box.lo[:2].copy()
    extent = box.hi[:2] - origin
    w = max(1, int(np.ceil(extent[0] / cell_size)))
    h = max(1, int(np.ceil(extent[1] / cell_size)))
    ix = np.clip(((client.positions[:, 0] - origin[0]) / cell_size).astype(np.int64), 0, w - 1)
    iy = np.clip(((client.positions[:, 1] - origin[1]) / cell_size).astype(np.int64), 0, h - 1)
    flat = ix * h + iy

    has_floor = np.zeros(w * h, dtype=bool)
    has_floor[flat[floor_mask]] = True
    z = client.positions[:, 2]
    blocking = (~floor_mask) & (z >= floor_z) & (z <= floor_z + occupy_height)
    blocked = np.zeros(w * h, dtype=bool)
    blocked[flat[blocking]] = True

    free = (has_floor & ~blocked).reshape(w, h)
    return FloorOccupancyGrid(origin, cell_size, free, floor_z)


def erode_free_map(grid: FloorOccupancyGrid, footprint: np.ndarray) -> FloorOccupancyGrid:
    """Free cells where the whole footprint (anchored at its centroid
    cell) fits inside the original free region."""
    if not footprint.any():
        raise ValidationError("footprint is empty")
    eroded = binary_erode(grid.free, footprint, footprint_anchor(footprint))
    return FloorOccupancyGrid(grid.origin.copy(), grid.cell_size, eroded, grid.floor_z)


# ---------------------------------------------------------------------------
# placement


def _rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    rot = points.copy()
    rot[:, 0] = c * points[:, 0] - s * points[:, 1]
    rot[:, 1] = s * points[:, 0] + c * points[:, 1]
    return rot


def place_instance(
    grid: FloorOccupancyGrid, inst: InstanceGroup, rng: np.random.Generator
) -> Placement | None:
    """Draw a rotation, erode the free map by the rotated footprint, and
    sample a surviving cell uniformly.  None when nothing fits."""
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    rotated = _rotate_z(inst.points, angle)
    offsets = _footprint_offsets(rotated[:, :2], grid.cell_size)
    raster, shift = _offsets_to_raster(offsets)
    anchor = footprint_anchor(raster)
    eroded = erode_free_map(grid, raster)
    cells = np.argwhere(eroded.free)
    if cells.shape[0] == 0:
        return None
    pick = cells[int(rng.integers(cells.shape[0]))]
    host = pick + shift - np.array(anchor)
    tx = grid.origin[0] + (host[0] + 0.5) * grid.cell_size
    ty = grid.origin[1] + (host[1] + 0.5) * grid.cell_size
    return Placement(np.array([tx, ty, grid.floor_z]), angle)


def placement_cells(
    grid: FloorOccupancyGrid, inst: InstanceGroup, placement: Placement
) -> np.ndarray:
    """Grid cells covered by the instance's closed footprint under the
    placement; exact recomputation of what place_instance audited."""
    rotated = _rotate_z(inst.points, placement.rotation_z)
    offsets = _footprint_offsets(rotated[:, :2], grid.cell_size)
    host_x = int(np.floor((placement.translation[0] - grid.origin[0]) / grid.cell_size))
    host_y = int(np.floor((placement.translation[1] - grid.origin[1]) / grid.cell_size))
    return offsets + np.array([host_x, host_y])


def apply_placement(inst: InstanceGroup, placement: Placement) -> np.ndarray:
    """World-frame coordinates of the instance under the placement."""
    return _rotate_z(inst.points, placement.rotation_z) + placement.translation


def cinmix(
    vendor: PointCloud,
    client: PointCloud,
    cfg: MixConfig | None = None,
    rng: np.random.Generator | None = None,
    groups: list[InstanceGroup] | None = None,
    grid: FloorOccupancyGrid | None = None,
    return_placements: bool = False,
):
    """Insert vendor instance groups into the client scene.

    Groups are sampled with replacement; each placement marks its cells
    occupied before the next attempt, and failed placements are skipped.
    Precomputed ``groups``/``grid`` may be passed to amortize extraction
    over many mixes; colors are dropped from the output.  With
    ``return_placements`` the (instance, placement) pairs come back too,
    which the overlap audits rely on.
    """
    cfg = cfg or MixConfig()
    rng = np.random.default_rng() if rng is None else rng
    work = (grid or build_floor_grid(client, cfg.cell_size, cfg.occupy_height)).copy()
    if groups is None:
        groups = extract_instance_groups(
            vendor, cfg.dbscan, cfg.cell_size, cfg.cluster_subsample, rng
        )
    count = cfg.num_instances if cfg.num_instances is not None else int(rng.integers(1, 5))

    placements: list[tuple[InstanceGroup, Placement]] = []
    added_pos: list[np.ndarray] = []
    added_lab: list[np.ndarray] = []
    if groups:
        for _ in range(count):
            inst = groups[int(rng.integers(len(groups)))]
            placement = place_instance(work, inst, rng)
            if placement is None:
                continue
            cells = placement_cells(work, inst, placement)
            work.free[cells[:, 0], cells[:, 1]] = False
            world = apply_placement(inst, placement)
            placements.append((inst, placement))
            added_pos.append(world)
            added_lab.append(np.full(world.shape[0], inst.class_id, dtype=np.int64))
    if added_pos:
        mixed = PointCloud(
            np.concatenate([client.positions] + added_pos),
            np.concatenate([client.labels] + added_lab),
        )
    else:
        mixed = PointCloud(client.positions, client.labels, client.colors)
    if return_placements:
        return mixed, placements
    return mixed


# ---------------------------------------------------------------------------
# baseline mixers


def mix3d(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate two scenes after moving each bounding-box center to
    the origin."""
    pos_a = a.positions - bounding_box(a).center
    pos_b = b.positions - bounding_box(b).center
    colors = None
    if a.colors is not None and b.colors is not None:
        colors = np.concatenate([a.colors, b.colors])
    return PointCloud(
        np.concatenate([pos_a, pos_b]),
        np.concatenate([a.labels, b.labels]),
        colors,
    )


def cuboid_mix(
    a: PointCloud,
    b: PointCloud,
    splits: tuple[int, int, int] = (2, 2, 1),
    rng: np.random.Generator | None = None,
) -> tuple[PointCloud, np.ndarray]:
    """Split both scenes into the same fractional cuboid lattice and take
    each cell from one source scene chosen by coin flip.

    Returns the mixed cloud plus per-point provenance (0 = from a,
    1 = from b).
    """
    if any(s < 1 for s in splits):
        raise ValidationError(f"splits must be >= 1 per axis, got {splits}")
    rng = np.random.default_rng() if rng is None else rng
    fracs = [np.sort(rng.uniform(size=s - 1)) for s in splits]
    n_cells = splits[0] * splits[1] * splits[2]
    take_a = rng.random(n_cells) < 0.5

    def cell_ids(pc: PointCloud) -> np.ndarray:
        box = bounding_box(pc)
        ids = np.zeros(len(pc), dtype=np.int64)
        for axis, s in enumerate(splits):
            planes = box.lo[axis] + fracs[axis] * (box.hi[axis] - box.lo[axis])
            ids = ids * s + np.searchsorted(planes, pc.positions[:, axis], side="right")
        return ids

    keep_a = take_a[cell_ids(a)]
    keep_b = ~take_a[cell_ids(b)]
    total = int(keep_a.sum()) + int(keep_b.sum())
    if total == 0:
        raise EmptyResult("cuboid mix selected no points")
    positions = np.concatenate([a.positions[keep_a], b.positions[keep_b]])
    labels = np.concatenate([a.labels[keep_a], b.labels[keep_b]])
    colors = None
    if a.colors is not None and b.colors is not None:
        colors = np.concatenate([a.colors[keep_a], b.colors[keep_b]])
    provenance = np.concatenate(
        [np.zeros(int(keep_a.sum()), dtype=np.int64), np.ones(int(keep_b.sum()), dtype=np.int64)]
    )
    return PointCloud(positions, labels, colors), provenance
