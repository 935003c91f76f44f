"""Point-cloud scene model, label space, and IPC1 text file I/O.

The IPC1 format is a plain UTF-8 text format with LF line endings:

    line 1:      ``ipc1``
    line 2:      ``points <N>``
    line 3:      ``fields x y z label``  or  ``fields x y z r g b label``
    lines 4..:   one whitespace-separated record per point

Coordinates are meters.  Labels are the 8 semantic classes below plus
255 for "ignore".  A dataset is a directory of ``*.ipc1`` files with a
``manifest.json`` listing the file names per split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyCloud,
    FieldCountMismatch,
    InvalidClassId,
    IoFailure,
    LabelOutOfRange,
    MalformedHeader,
    NonFiniteCoordinate,
)

NUM_CLASSES = 8
WALL, FLOOR, CHAIR, SOFA, TABLE, DOOR, WINDOW, BOOKSHELF = range(NUM_CLASSES)
IGNORE_LABEL = 255

CLASS_NAMES = ("wall", "floor", "chair", "sofa", "table", "door", "window", "bookshelf")

# Countable object classes, as opposed to structural "stuff".
THING_CLASSES = (CHAIR, SOFA, TABLE, DOOR, WINDOW, BOOKSHELF)

# Thing classes that stand on the floor and are therefore eligible for
# instance mixing.  Doors and windows are wall-mounted and excluded.
MIXABLE_CLASSES = (CHAIR, SOFA, TABLE, BOOKSHELF)

_VALID_LABELS = frozenset(range(NUM_CLASSES)) | {IGNORE_LABEL}


def is_thing_class(class_id: int) -> bool:
    return class_id in THING_CLASSES


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box with componentwise ``lo <= hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("Aabb corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError("Aabb lo must be <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass(frozen=True)
class PointCloud:
    """Immutable labeled point cloud.

    positions: (N, 3) float64 meters, all finite.
    labels:    (N,) integers in {0..7} or 255 (ignore).
    colors:    optional (N, 3) uint8.
    """

    positions: np.ndarray
    labels: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        lab = np.ascontiguousarray(self.labels, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise EmptyCloud("point cloud must contain at least one point")
        if lab.shape != (pos.shape[0],):
            raise ValueError("labels length must match positions")
        if not np.all(np.isfinite(pos)):
            raise NonFiniteCoordinate("positions contain non-finite values")
        bad = ~(np.isin(lab, list(_VALID_LABELS)))
        if np.any(bad):
            raise LabelOutOfRange(f"labels outside {{0..7, 255}}: {lab[bad][:5]}")
        col = self.colors
        if col is not None:
            col = np.ascontiguousarray(col)
            if col.shape != (pos.shape[0], 3):
                raise ValueError("colors must be (N, 3)")
            if col.min() < 0 or col.max() > 255:
                raise ValueError("colors must lie in [0, 255]")
            col = col.astype(np.uint8)
            col.setflags(write=False)
        pos.setflags(write=False)
        lab.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def select(self, indices: np.ndarray) -> "PointCloud":
        """New cloud containing the given point indices, in order."""
        return PointCloud(
            self.positions[indices],
            self.labels[indices],
            None if self.colors is None else self.colors[indices],
        )


def class_indices(pc: PointCloud, class_id: int) -> np.ndarray:
    """Ascending indices of points labeled ``class_id``."""
    if not (0 <= class_id < NUM_CLASSES):
        raise InvalidClassId(f"class id must be in 0..{NUM_CLASSES - 1}, got {class_id}")
    return np.nonzero(pc.labels == class_id)[0]


def bounding_box(pc: PointCloud) -> Aabb:
    """Componentwise min/max box of the positions."""
    if len(pc) == 0:
        raise EmptyCloud("cannot compute bounding box of an empty cloud")
    return Aabb(pc.positions.min(axis=0), pc.positions.max(axis=0))


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest string that parses back to
    # the same double, so save -> load is bit-exact on positions.
    return repr(float(x))


def save_scene(pc: PointCloud, path: str | Path) -> None:
    """Write an IPC1 file.  Raises IoFailure when the path is unwritable."""
    n = len(pc)
    lines = ["ipc1", f"points {n}"]
    if pc.colors is None:
        lines.append("fields x y z label")
        for i in range(n):
            x, y, z = pc.positions[i]
            lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {pc.labels[i]}")
    else:
        lines.append("fields x y z r g b label")
        for i in range(n):
            x, y, z = pc.positions[i]
            r, g, b = pc.colors[i]
            lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {r} {g} {b} {pc.labels[i]}")
    data = "\n".join(lines) + "\n"
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write scene to {path}: {exc}") from exc


def load_scene(path: str | Path) -> PointCloud:
    """Parse an IPC1 file into a validated PointCloud.

    Errors carry the 1-based line number of the offending record.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read scene from {path}: {exc}") from exc

    lines = text.splitlines()
    if len(lines) < 3:
        raise MalformedHeader(f"{path}: expected at least 3 header lines")
    if lines[0].strip() != "ipc1":
        raise MalformedHeader(f"{path}:1: first line must be 'ipc1'")
    head = lines[1].split()
    if len(head) != 2 or head[0] != "points":
        raise MalformedHeader(f"{path}:2: expected 'points <N>'")
    try:
        n = int(head[1])
    except ValueError:
        raise MalformedHeader(f"{path}:2: point count is not an integer") from None
    if n < 1:
        raise EmptyCloud(f"{path}:2: point count must be >= 1")
    fields = lines[2].split()
    if fields == ["fields", "x", "y", "z", "label"]:
        has_color = False
        width = 4
    elif fields == ["fields", "x", "y", "z", "r", "g", "b", "label"]:
        has_color = True
        width = 7
    else:
        raise MalformedHeader(f"{path}:3: unrecognized fields line {lines[2]!r}")

    records = [ln for ln in lines[3:] if ln.strip()]
    if len(records) != n:
        raise FieldCountMismatch(
            f"{path}:{3 + min(len(records), n) + 1}: header says {n} points "
            f"but file has {len(records)} records"
        )

    positions = np.empty((n, 3), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    colors = np.empty((n, 3), dtype=np.int64) if has_color else None
    for i, ln in enumerate(records):
        lineno = 4 + i
        parts = ln.split()
        if len(parts) != width:
            raise FieldCountMismatch(
                f"{path}:{lineno}: expected {width} fields, got {len(parts)}"
            )
        try:
            x, y, z = float(parts[0]), float(parts[1]), float(parts[2])
            rest = [int(p) for p in parts[3:]]
        except ValueError:
            raise FieldCountMismatch(f"{path}:{lineno}: unparseable record") from None
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise NonFiniteCoordinate(f"{path}:{lineno}: non-finite coordinate")
        label = rest[-1]
        if label not in _VALID_LABELS:
            raise LabelOutOfRange(f"{path}:{lineno}: label {label} outside {{0..7, 255}}")
        if has_color:
            r, g, b = rest[0], rest[1], rest[2]
            if min(r, g, b) < 0 or max(r, g, b) > 255:
                raise LabelOutOfRange(f"{path}:{lineno}: color outside [0, 255]")
            colors[i] = (r, g, b)
        positions[i] = (x, y, z)
        labels[i] = label
    return PointCloud(positions, labels, colors)


def save_manifest(dataset_dir: str | Path, splits: dict[str, list[str]]) -> None:
    """Write manifest.json mapping split name -> ordered file names."""
    path = Path(dataset_dir) / "manifest.json"
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"format": "ipc1", "splits": splits}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest to {path}: {exc}") from exc


def load_manifest(dataset_dir: str | Path) -> dict[str, list[str]]:
    path = Path(dataset_dir) / "manifest.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot read manifest from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: invalid JSON: {exc}") from exc
    if "splits" not in data or not isinstance(data["splits"], dict):
        raise MalformedHeader(f"{path}: manifest must contain a 'splits' object")
    return {k: list(v) for k, v in data["splits"].items()}


def load_split(dataset_dir: str | Path, split: str) -> list[tuple[str, PointCloud]]:
    """Load every scene of a manifest split as (file name, cloud) pairs."""
    dataset_dir = Path(dataset_dir)
    splits = load_manifest(dataset_dir)
    if split not in splits:
        raise MalformedHeader(f"{dataset_dir}: manifest has no split {split!r}")
    return [(name, load_scene(dataset_dir / name)) for name in splits[split]]
