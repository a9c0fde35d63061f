"""Ray-cast synthetic LiDAR scenes for desk-scale experiments.

Every scene is rendered by casting one ray per pixel center of a virtual
sensor against a handful of primitives (ground plane, enclosing wall, boxes,
vertical cylinders, spheres). Background kinds (plane, wall) are always
present; each of ``slots`` object slots is filled by drawing a class from the
spawn-rate distribution, where drawing a background class leaves the slot
empty.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig
from .rangeview import PointCloud, SensorGeometry

log = logging.getLogger(__name__)

KINDS = ("plane", "wall", "box", "cylinder", "sphere")
BACKGROUND_KINDS = ("plane", "wall")


@dataclass
class ClassSpec:
    name: str
    train_id: int
    kind: str
    spawn_rate: float
    # kind-specific extents (meters), sampled uniformly in [lo, hi]
    size: tuple = (1.0, 1.0)
    height: tuple = (1.5, 1.5)
    distance: tuple = (5.0, 15.0)
    remission: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"class {self.name!r}: unknown kind {self.kind!r}")
        if self.train_id < 1:
            raise InvalidConfig(f"class {self.name!r}: train id 0 is reserved for ignore")
        if self.spawn_rate < 0:
            raise InvalidConfig(f"class {self.name!r}: negative spawn rate")
        self.size = tuple(self.size)
        self.height = tuple(self.height)
        self.distance = tuple(self.distance)


@dataclass
class SceneConfig:
    classes: list = field(default_factory=list)
    geometry: SensorGeometry = field(default_factory=lambda: SensorGeometry(32, 256, 3.0, -25.0))
    sensor_height: float = 1.73
    max_range: float = 50.0
    slots: int = 12
    range_noise: float = 0.0
    remission_noise: float = 0.05

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        if isinstance(self.geometry, dict):
            self.geometry = SensorGeometry(**self.geometry)

    def validate(self):
        if not self.classes:
            raise InvalidConfig("scene config names no classes")
        ids = [c.train_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate train ids in scene config")
        if sum(c.spawn_rate for c in self.classes) <= 0:
            raise InvalidConfig("spawn rates sum to zero")

    @property
    def num_classes(self) -> int:
        return max(c.train_id for c in self.classes) + 1

    def class_names(self) -> dict:
        return {c.train_id: c.name for c in self.classes}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geometry"] = asdict(self.geometry)
        return d

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def desk_scene_config(**overrides) -> SceneConfig:
    """Four-class 32x256 scene used by the overfit and ablation fixtures.

    `person` spheres are the rare class (a few percent of pixels).
    """
    classes = [
        ClassSpec("ground", 1, "plane", 0.45, remission=0.25),
        ClassSpec("building", 2, "wall", 0.15, size=(14.0, 22.0), height=(4.0, 8.0),
                  remission=0.55),
        ClassSpec("car", 3, "box", 0.25, size=(1.6, 4.2), height=(1.3, 1.7),
                  distance=(5.0, 11.0), remission=0.8),
        ClassSpec("person", 4, "sphere", 0.3, size=(0.45, 0.65), distance=(4.0, 9.0),
                  remission=0.05),
    ]
    cfg = SceneConfig(classes=classes)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


# -- ray intersection kernels; all take unit rays [N, 3] from the origin ----


def _hit_plane(rays, ground_z):
    dz = rays[:, 2]
    t = np.full(len(rays), np.inf)
    down = dz < -1e-9
    t[down] = ground_z / dz[down]
    return t


def _hit_wall(rays, radius, z_lo, z_hi):
    horiz = np.hypot(rays[:, 0], rays[:, 1])
    t = np.where(horiz > 1e-9, radius / np.maximum(horiz, 1e-9), np.inf)
    z = t * rays[:, 2]
    return np.where((z >= z_lo) & (z <= z_hi), t, np.inf)


def _hit_box(rays, center, half, yaw):
    # rotate rays into the box frame
    c, s = np.cos(-yaw), np.sin(-yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    d = rays @ rot.T
    o = -(rot @ center)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _hit_cylinder(rays, center_xy, radius, z_lo, z_hi):
    dx, dy = rays[:, 0], rays[:, 1]
    a = dx * dx + dy * dy
    b = -2 * (dx * center_xy[0] + dy * center_xy[1])
    c = center_xy @ center_xy - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(len(rays), np.inf)
    ok = (disc >= 0) & (a > 1e-12)
    t[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
    z = t * rays[:, 2]
    return np.where((t > 0) & (z >= z_lo) & (z <= z_hi), t, np.inf)


def _hit_sphere(rays, center, radius):
    b = -2 * rays @ center
    c = center @ center - radius * radius
    disc = b * b - 4 * c
    t = np.full(len(rays), np.inf)
    ok = disc >= 0
    t[ok] = (-b[ok] - np.sqrt(disc[ok])) / 2
    return np.where(t > 0, t, np.inf)


def _uniform(rng, bounds):
    return rng.uniform(bounds[0], bounds[1])


def render_scene(rng, cfg: SceneConfig) -> PointCloud:
    geom = cfg.geometry
    rays = geom.ray_directions().reshape(3, -1).T.astype(np.float64)
    n = len(rays)
    depth = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.int64)
    ground_z = -cfg.sensor_height

    def merge(t, cls):
        nearer = t < depth
        depth[nearer] = t[nearer]
        label[nearer] = cls.train_id

    for cls in cfg.classes:
        if cls.kind == "plane":
            merge(_hit_plane(rays, ground_z), cls)
        elif cls.kind == "wall":
            radius = _uniform(rng, cls.size)
            merge(_hit_wall(rays, radius, ground_z, ground_z + _uniform(rng, cls.height)), cls)

    objects = [c for c in cfg.classes if c.kind not in BACKGROUND_KINDS]
    rates = np.array([c.spawn_rate for c in cfg.classes], dtype=np.float64)
    rates /= rates.sum()
    for _ in range(cfg.slots):
        cls = cfg.classes[rng.choice(len(cfg.classes), p=rates)]
        if cls not in objects:
            continue
        dist = _uniform(rng, cls.distance)
        az = rng.uniform(-np.pi, np.pi)
        cx, cy = dist * np.cos(az), dist * np.sin(az)
        if cls.kind == "box":
            length = _uniform(rng, cls.size)
            half = np.array([length / 2, length / 4 + 0.45, _uniform(rng, cls.height) / 2])
            center = np.array([cx, cy, ground_z + half[2]])
            t = _hit_box(rays, center, half, rng.uniform(0, np.pi))
        elif cls.kind == "cylinder":
            r = _uniform(rng, cls.size)
            t = _hit_cylinder(rays, np.array([cx, cy]), r, ground_z,
                              ground_z + _uniform(rng, cls.height))
        else:
            r = _uniform(rng, cls.size)
            t = _hit_sphere(rays, np.array([cx, cy, ground_z + r]), r)
        merge(t, cls)

    hit = depth <= cfg.max_range
    if cfg.range_noise > 0:
        depth = depth + rng.normal(0.0, cfg.range_noise, n)
    base = np.zeros(cfg.num_classes)
    for c in cfg.classes:
        base[c.train_id] = c.remission
    remission = np.clip(base[label] + rng.uniform(-cfg.remission_noise, cfg.remission_noise, n),
                        0.0, 1.0)
    pts = rays[hit] * depth[hit, None]
    return PointCloud(pts, remission[hit], label[hit])


def generate_synthetic(seed, config: SceneConfig, num_scenes: int = 10) -> list:
    """Render `num_scenes` labeled clouds; identical output for identical seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    clouds = [render_scene(rng, config) for _ in range(num_scenes)]
    freq = label_frequencies(clouds, config.num_classes)
    log.info("synthetic corpus: %d scenes, class frequencies %s", num_scenes,
             {config.class_names().get(c, c): round(float(f), 4)
              for c, f in enumerate(freq) if c})
    return clouds


def label_frequencies(clouds, num_classes) -> np.ndarray:
    """Point-space frequency of every class id over labeled (non-zero) points."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for c in clouds:
        counts += np.bincount(c.labels, minlength=num_classes)[:num_classes]
    counts[0] = 0
    total = counts.sum()
    return counts / total if total else counts.astype(float)
