"""Point-pattern augmentation.

``virtual_scan`` imitates the occlusion, dropout, and sensor noise of a
real scanning pass: a few virtual cameras stand on free floor cells, and
per camera only the nearest point in each spherical direction bin stays
visible.  ``random_rigid`` applies the usual z-rotation / uniform scale /
translation jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cinmix import build_floor_grid
from .errors import EmptyResult, NoFloor, ValidationError
from .scene import PointCloud, bounding_box

_TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class ScanSimParams:
    num_cameras: int = 4
    camera_height: float = 1.5
    azimuth_bins: int = 360
    elevation_bins: int = 180
    noise_sigma: float = 0.01
    keep_prob: float = 0.95

    def __post_init__(self):
        if self.num_cameras < 1:
            raise ValidationError("num_cameras must be >= 1")
        if self.azimuth_bins < 1 or self.elevation_bins < 1:
            raise ValidationError("direction bins must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ValidationError("keep_prob must lie in (0, 1]")


@dataclass(frozen=True)
class RigidAugParams:
    rotation_max: float = _TWO_PI
    scale_min: float = 0.9
    scale_max: float = 1.1
    translation_max: float = 0.1

    def __post_init__(self):
        if self.rotation_max < 0 or self.translation_max < 0:
            raise ValidationError("rotation_max and translation_max must be >= 0")
        if not (0 < self.scale_min <= self.scale_max):
            raise ValidationError("need 0 < scale_min <= scale_max")


def visibility_mask(
    positions: np.ndarray,
    cameras: np.ndarray,
    azimuth_bins: int,
    elevation_bins: int,
) -> np.ndarray:
    """True for points that are the nearest in their direction bin for
    at least one camera.  Points coincident with a camera are visible."""
    positions = np.asarray(positions, dtype=np.float64)
    visible = np.zeros(positions.shape[0], dtype=bool)
    for cam in np.atleast_2d(cameras):
        delta = positions - cam
        dist = np.linalg.norm(delta, axis=1)
        at_cam = dist < 1e-12
        visible |= at_cam
        azimuth = np.arctan2(delta[:, 1], delta[:, 0])
        az_bin = np.clip(
            ((azimuth + np.pi) / _TWO_PI * azimuth_bins).astype(np.int64),
            0,
            azimuth_bins - 1,
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            polar = np.arccos(np.clip(delta[:, 2] / np.maximum(dist, 1e-300), -1.0, 1.0))
        el_bin = np.clip(
            (polar / np.pi * elevation_bins).astype(np.int64), 0, elevation_bins - 1
        )
        bins = az_bin * elevation_bins + el_bin
        order = np.argsort(dist, kind="stable")
        _, first = np.unique(bins[order], return_index=True)
        visible[order[first]] = True
    return visible


def _camera_positions(pc: PointCloud, params: ScanSimParams, rng: np.random.Generator) -> np.ndarray:
    """Random free floor cells at camera height; bounding-box center
    fallback when the scene has no usable floor."""
    try:
        grid = build_floor_grid(pc, cell_size=0.2)
        cells = np.argwhere(grid.free)
        if cells.shape[0] == 0:
            raise NoFloor("no free floor cell")
        picks = cells[rng.integers(cells.shape[0], size=params.num_cameras)]
        xy = grid.origin + (picks + 0.5) * grid.cell_size
        z = np.full(params.num_cameras, grid.floor_z + params.camera_height)
        return np.column_stack([xy, z])
    except NoFloor:
        box = bounding_box(pc)
        cam = np.array([box.center[0], box.center[1], box.lo[2] + params.camera_height])
        return np.tile(cam, (params.num_cameras, 1))


def virtual_scan(
    pc: PointCloud, params: ScanSimParams | None = None, rng: np.random.Generator | None = None
) -> PointCloud:
    """Cull points hidden from every camera, drop survivors with
    probability 1 - keep_prob, then jitter.  Labels are preserved.

    Raises EmptyResult when nothing survives; callers should retry with
    a different seed.
    """
    params = params or ScanSimParams()
    rng = np.random.default_rng() if rng is None else rng
    cameras = _camera_positions(pc, params, rng)
    mask = visibility_mask(pc.positions, cameras, params.azimuth_bins, params.elevation_bins)
    idx = np.nonzero(mask)[0]
    if params.keep_prob < 1.0:
        idx = idx[rng.random(idx.size) < params.keep_prob]
    if idx.size == 0:
        raise EmptyResult("virtual scan culled every point")
    positions = pc.positions[idx]
    if params.noise_sigma > 0:
        positions = positions + rng.normal(0.0, params.noise_sigma, size=positions.shape)
    return PointCloud(
        positions,
        pc.labels[idx],
        None if pc.colors is None else pc.colors[idx],
    )


def random_rigid(
    pc: PointCloud, params: RigidAugParams | None = None, rng: np.random.Generator | None = None
) -> PointCloud:
    """Uniform z-rotation about the box center, uniform scale about the
    floor level, and xy translation jitter.  Zero ranges are exact
    no-ops."""
    params = params or RigidAugParams()
    rng = np.random.default_rng() if rng is None else rng
    angle = float(rng.uniform(0.0, params.rotation_max))
    scale = float(rng.uniform(params.scale_min, params.scale_max))
    shift = rng.uniform(-params.translation_max, params.translation_max, size=2)

    positions = pc.positions
    box = bounding_box(pc)
    pivot = np.array([box.center[0], box.center[1], box.lo[2]])
    if angle != 0.0:
        local = positions - pivot
        c, s = np.cos(angle), np.sin(angle)
        rotated = local.copy()
        rotated[:, 0] = c * local[:, 0] - s * local[:, 1]
        rotated[:, 1] = s * local[:, 0] + c * local[:, 1]
        positions = rotated + pivot
    if scale != 1.0:
        positions = (positions - pivot) * scale + pivot
    if shift[0] != 0.0 or shift[1] != 0.0:
        positions = positions + np.array([shift[0], shift[1], 0.0])
    if positions is pc.positions:
        return pc
    return PointCloud(positions, pc.labels, pc.colors)
