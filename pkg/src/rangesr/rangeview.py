"""Spherical projection, channel decimation and scan I/O for range-view LiDAR."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    CorruptScan,
    DegenerateProjection,
    EmptyInput,
    InvalidConfig,
    MissingLabels,
    ShapeMismatch,
)

FILL_VALUE = -1.0
IGNORE_INDEX = 0
CHANNELS = ("range", "remission", "x", "y", "z")


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3] x, y, z in meters
    remission: np.ndarray  # [N]
    labels: Optional[np.ndarray] = None  # [N] train ids, 0 = ignore

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.remission = np.asarray(self.remission, dtype=np.float32).reshape(-1)
        if len(self.remission) != len(self.points):
            raise ShapeMismatch(
                f"{len(self.points)} points but {len(self.remission)} remissions")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ShapeMismatch(
                    f"{len(self.points)} points but {len(self.labels)} labels")

    def __len__(self):
        return len(self.points)

    def drop_zero_points(self) -> "PointCloud":
        keep = np.any(self.points != 0, axis=1)
        return PointCloud(
            self.points[keep],
            self.remission[keep],
            None if self.labels is None else self.labels[keep],
        )


@dataclass(frozen=True)
class SensorGeometry:
    height: int = 64
    width: int = 1024
    fov_up: float = 3.0  # degrees
    fov_down: float = -25.0  # degrees, negative below the horizon

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise InvalidConfig(f"geometry too small: {self.height}x{self.width}")
        if not self.fov_up > self.fov_down:
            raise InvalidConfig(
                f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")

    @property
    def fov(self) -> float:
        return np.radians(self.fov_up - self.fov_down)

    @property
    def delta_yaw(self) -> float:
        return 2 * np.pi / self.width

    @property
    def delta_pitch(self) -> float:
        return self.fov / self.height

    def row_pitch(self) -> np.ndarray:
        """Elevation angle (radians) at the center of every row."""
        v = np.arange(self.height) + 0.5
        return (1.0 - v / self.height) * self.fov + np.radians(self.fov_down)

    def col_yaw(self) -> np.ndarray:
        """Azimuth angle (radians) at the center of every column."""
        u = np.arange(self.width) + 0.5
        return np.pi * (1.0 - 2.0 * u / self.width)

    def ray_directions(self) -> np.ndarray:
        """Unit ray through every pixel center, shape [3, H, W]."""
        pitch = self.row_pitch()[:, None]
        yaw = self.col_yaw()[None, :]
        cp = np.cos(pitch)
        return np.stack([
            cp * np.cos(yaw),
            cp * np.sin(yaw),
            np.broadcast_to(np.sin(pitch), (self.height, self.width)),
        ]).astype(np.float32)


KITTI_GEOMETRY = SensorGeometry(64, 1024, 3.0, -25.0)
POSS_GEOMETRY = SensorGeometry(40, 1024, 7.0, -16.0)


@dataclass
class RangeImage:
    data: np.ndarray  # [5, H, W] in CHANNELS order
    valid: np.ndarray  # [H, W] bool
    geometry: SensorGeometry

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]

    @property
    def range(self) -> np.ndarray:
        return self.data[0]

    @property
    def remission(self) -> np.ndarray:
        return self.data[1]

    @property
    def xyz(self) -> np.ndarray:
        return self.data[2:5]

    @property
    def shape(self):
        return self.valid.shape


@dataclass
class LabelImage:
    labels: np.ndarray  # [H, W] int
    ignore_index: int = IGNORE_INDEX


@dataclass(frozen=True)
class DownsampleSpec:
    """Row-selection operator mapping a hi_height image to lo_height rows."""

    selected_rows: tuple
    hi_height: int
    lo_height: int = field(default=-1)

    def __post_init__(self):
        rows = tuple(int(r) for r in self.selected_rows)
        object.__setattr__(self, "selected_rows", rows)
        if self.lo_height == -1:
            object.__setattr__(self, "lo_height", len(rows))
        if len(rows) != self.lo_height:
            raise InvalidConfig(
                f"{len(rows)} selected rows but lo_height={self.lo_height}")
        if len(set(rows)) != len(rows) or list(rows) != sorted(rows):
            raise InvalidConfig("selected rows must be sorted and distinct")
        if rows and (rows[0] < 0 or rows[-1] >= self.hi_height):
            raise InvalidConfig(f"selected rows out of range for height {self.hi_height}")

    @classmethod
    def uniform(cls, hi_height: int, lo_height: int) -> "DownsampleSpec":
        """Every (hi/lo)-th row starting at row 0."""
        if lo_height < 1 or hi_height % lo_height:
            raise InvalidConfig(f"cannot stride {hi_height} rows down to {lo_height}")
        stride = hi_height // lo_height
        return cls(tuple(range(0, hi_height, stride)), hi_height, lo_height)

    def matrix(self) -> np.ndarray:
        d = np.zeros((self.lo_height, self.hi_height))
        d[np.arange(self.lo_height), list(self.selected_rows)] = 1.0
        return d

    def nearest_rows(self) -> np.ndarray:
        """For every high-res row, the index k of the nearest selected row (ties go up)."""
        sel = np.asarray(self.selected_rows)
        dist = np.abs(np.arange(self.hi_height)[:, None] - sel[None, :])
        return np.argmin(dist, axis=1)


def project(cloud: PointCloud, geom: SensorGeometry):
    """Spherical projection; returns (RangeImage, LabelImage).

    Out-of-FOV points are clamped to the border rows. When several points land
    in one pixel the nearest wins; ties keep the earliest point.
    """
    if len(cloud) == 0:
        raise EmptyInput("empty point cloud")
    cloud = cloud.drop_zero_points()
    if len(cloud) == 0:
        raise EmptyInput("point cloud holds only zero points")

    pts = cloud.points.astype(np.float64)
    depth = np.linalg.norm(pts, axis=1)
    yaw = np.arctan2(pts[:, 1], pts[:, 0])
    pitch = np.arcsin(np.clip(pts[:, 2] / depth, -1.0, 1.0))

    fov_down = np.radians(geom.fov_down)
    in_fov = (pitch >= fov_down) & (pitch <= np.radians(geom.fov_up))
    if not in_fov.any():
        raise DegenerateProjection("no point inside the vertical field of view")

    u = np.floor(0.5 * (1.0 - yaw / np.pi) * geom.width)
    v = np.floor((1.0 - (pitch + abs(fov_down)) / geom.fov) * geom.height)
    u = np.clip(u, 0, geom.width - 1).astype(np.int64)
    v = np.clip(v, 0, geom.height - 1).astype(np.int64)

    # far-to-near with later input indices first, so the winner is written last
    idx = np.arange(len(depth))
    order = np.lexsort((-idx, -depth))

    h, w = geom.height, geom.width
    data = np.full((5, h, w), FILL_VALUE, dtype=np.float32)
    labels = np.full((h, w), IGNORE_INDEX, dtype=np.int64)
    valid = np.zeros((h, w), dtype=bool)
    vo, uo = v[order], u[order]
    data[0, vo, uo] = depth[order]
    data[1, vo, uo] = cloud.remission[order]
    data[2:5, vo, uo] = cloud.points[order].T
    valid[vo, uo] = True
    if cloud.labels is not None:
        labels[vo, uo] = cloud.labels[order]
    return RangeImage(data, valid, geom), LabelImage(labels)


def pixel_indices(cloud: PointCloud, geom: SensorGeometry):
    """(row, col) every point of `cloud` projects to, without collision handling."""
    pts = cloud.points.astype(np.float64)
    depth = np.maximum(np.linalg.norm(pts, axis=1), 1e-12)
    yaw = np.arctan2(pts[:, 1], pts[:, 0])
    pitch = np.arcsin(np.clip(pts[:, 2] / depth, -1.0, 1.0))
    u = np.floor(0.5 * (1.0 - yaw / np.pi) * geom.width)
    v = np.floor((1.0 - (pitch + abs(np.radians(geom.fov_down))) / geom.fov) * geom.height)
    return (np.clip(v, 0, geom.height - 1).astype(np.int64),
            np.clip(u, 0, geom.width - 1).astype(np.int64))


def back_project(img: RangeImage, labels: Optional[LabelImage] = None) -> PointCloud:
    """Emit one point per valid pixel along the pixel-center ray."""
    if not img.valid.any():
        raise DegenerateProjection("range image has no valid pixel")
    rays = img.geometry.ray_directions()
    rows, cols = np.nonzero(img.valid)
    rng = img.range[rows, cols]
    pts = (rays[:, rows, cols] * rng[None, :]).T
    lab = None if labels is None else labels.labels[rows, cols]
    return PointCloud(pts, img.remission[rows, cols], lab)


def degrade(img: RangeImage, spec: DownsampleSpec) -> RangeImage:
    """Keep only the selected rows: S = D T."""
    if spec.hi_height != img.valid.shape[0]:
        raise ShapeMismatch(
            f"image has {img.valid.shape[0]} rows, spec expects {spec.hi_height}")
    rows = list(spec.selected_rows)
    geom = img.geometry
    # geometry of the decimated image is only nominal; ray directions come from the hi-res grid
    lo_geom = SensorGeometry(max(spec.lo_height, 2), geom.width, geom.fov_up, geom.fov_down)
    return RangeImage(img.data[:, rows].copy(), img.valid[rows].copy(), lo_geom)


def degrade_labels(labels: LabelImage, spec: DownsampleSpec) -> LabelImage:
    return LabelImage(labels.labels[list(spec.selected_rows)].copy(), labels.ignore_index)


# -- class maps -------------------------------------------------------------


@dataclass
class ClassMap:
    """raw label id -> train id; unmapped raw ids go to ignore (0) unless identity."""

    mapping: dict = field(default_factory=dict)
    names: dict = field(default_factory=dict)  # train id -> name
    identity: bool = False

    @classmethod
    def identity_map(cls) -> "ClassMap":
        return cls(identity=True)

    def __call__(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.int64)
        if self.identity:
            return raw.copy()
        lut_size = max(max(self.mapping, default=0), int(raw.max(initial=0))) + 1
        lut = np.zeros(lut_size, dtype=np.int64)
        for k, v in self.mapping.items():
            lut[k] = v
        return lut[raw]

    @property
    def num_classes(self) -> int:
        """Train ids plus the ignore slot."""
        ids = list(self.mapping.values()) + list(self.names)
        return max(ids, default=0) + 1

    def class_names(self, num_classes: int) -> list:
        return [self.names.get(c, f"class_{c}") for c in range(num_classes)]


def read_class_map(path) -> ClassMap:
    """Parse `raw_id -> train_id [name]` lines; '#' starts a comment."""
    cmap = ClassMap()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                lhs, rhs = line.split("->")
                parts = rhs.split(None, 1)
                raw, train = int(lhs), int(parts[0])
            except ValueError as exc:
                raise InvalidConfig(f"{path}:{lineno}: cannot parse {line!r}") from exc
            if raw < 0 or train < 0:
                raise InvalidConfig(f"{path}:{lineno}: negative class id")
            cmap.mapping[raw] = train
            if len(parts) > 1 and train != IGNORE_INDEX:
                cmap.names.setdefault(train, parts[1].strip())
    return cmap


def write_class_map(cmap: ClassMap, path):
    with open(path, "w") as fh:
        for raw, train in sorted(cmap.mapping.items()):
            name = cmap.names.get(train)
            fh.write(f"{raw} -> {train}" + (f" {name}" if name else "") + "\n")


# -- scan files -------------------------------------------------------------

SCAN_FORMATS = ("kitti_bin", "poss")


def _label_path(path):
    stem, _ = os.path.splitext(path)
    sibling = stem + ".label"
    if os.path.exists(sibling):
        return sibling
    head, name = os.path.split(stem)
    parent = os.path.dirname(head)
    kitti = os.path.join(parent, "labels", name + ".label")
    if os.path.exists(kitti):
        return kitti
    return None


def ingest_scan(path, format="kitti_bin", with_labels=False, class_map=None) -> PointCloud:
    """Read a KITTI-layout scan (SemanticPOSS ships the same layout).

    Labels come from a sibling ``.label`` file (same stem, or ``../labels/``);
    the lower 16 bits hold the semantic class.
    """
    if format not in SCAN_FORMATS:
        raise InvalidConfig(f"unknown scan format {format!r}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0 or raw.size % 4:
        raise CorruptScan(f"{path}: {raw.size * 4} bytes is not a whole number of records")
    raw = raw.reshape(-1, 4)

    labels = None
    if with_labels:
        lpath = _label_path(path)
        if lpath is None:
            raise MissingLabels(f"no label file next to {path}")
        words = np.fromfile(lpath, dtype="<u4")
        if len(words) != len(raw):
            raise CorruptScan(f"{lpath}: {len(words)} labels for {len(raw)} points")
        labels = (words & 0xFFFF).astype(np.int64)
        labels = (class_map or ClassMap.identity_map())(labels)

    return PointCloud(raw[:, :3], raw[:, 3], labels).drop_zero_points()


def list_scans(directory) -> list:
    """Sorted ``*.bin`` paths in `directory` (or its ``velodyne/`` subfolder)."""
    sub = os.path.join(directory, "velodyne")
    base = sub if os.path.isdir(sub) else directory
    if not os.path.isdir(base):
        raise EmptyInput(f"{directory}: not a directory")
    paths = sorted(os.path.join(base, f) for f in os.listdir(base) if f.endswith(".bin"))
    if not paths:
        raise EmptyInput(f"{directory}: no .bin scans")
    return paths


def ingest_corpus(directory, format="kitti_bin", with_labels=True, class_map=None) -> list:
    return [ingest_scan(p, format, with_labels, class_map) for p in list_scans(directory)]


def write_scan(cloud: PointCloud, path, label_path=None):
    rec = np.concatenate([cloud.points, cloud.remission[:, None]], axis=1)
    rec.astype("<f4").tofile(path)
    if label_path is not None and cloud.labels is not None:
        cloud.labels.astype("<u4").tofile(label_path)


def save_range_image(path, img: RangeImage, labels: Optional[LabelImage] = None):
    g = img.geometry
    extra = {} if labels is None else {"labels": labels.labels}
    np.savez(path, data=img.data, valid=img.valid,
             geometry=np.array([g.height, g.width, g.fov_up, g.fov_down]), **extra)


def load_range_image(path):
    with np.load(path) as z:
        h, w, up, down = z["geometry"]
        img = RangeImage(z["data"], z["valid"], SensorGeometry(int(h), int(w), float(up), float(down)))
        labels = LabelImage(z["labels"]) if "labels" in z else None
    return img, labels
