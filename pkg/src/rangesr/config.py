"""Experiment configuration as flat ``section.key = value`` text.

Every key is declared by a dataclass field below; anything else is rejected.
Tuples are written comma-separated, booleans as true/false.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import InvalidConfig
from .losses import LossWeights
from .rangeview import DownsampleSpec, SensorGeometry
from .segnet import SegConfig
from .sr_core import UnrollConfig

REGIMES = ("hires_seg_only", "lores_seg_only", "end_to_end")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 80
    max_steps: int = 0  # 0 = no cap; otherwise the cosine horizon
    batch_size: int = 4
    weight_decay: float = 1e-4
    seed: int = 0
    regime: str = "end_to_end"
    val_fraction: float = 0.2
    clip_grad: bool = False
    grad_clip_norm: float = 10.0
    sr_warmstart_steps: int = 0
    context_aware_sr: bool = True
    mask_all_layers: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.regime not in REGIMES:
            raise InvalidConfig(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise InvalidConfig("val_fraction must lie in [0, 1)")


@dataclass
class DataConfig:
    lo_height: int = 16
    scan_format: str = "kitti_bin"
    class_map: str = ""  # path; empty = identity
    class_names: tuple = ()  # display names by train id, index 0 = ignore


@dataclass
class ExperimentConfig:
    geometry: SensorGeometry = field(default_factory=SensorGeometry)
    data: DataConfig = field(default_factory=DataConfig)
    unroll: UnrollConfig = field(default_factory=UnrollConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    @property
    def spec(self) -> DownsampleSpec:
        return DownsampleSpec.uniform(self.geometry.height, self.data.lo_height)

    def class_names(self):
        names = list(self.data.class_names)
        return [names[c] if c < len(names) else f"class_{c}" for c in range(self.seg.num_classes)]

    def to_flat(self) -> dict:
        return to_flat(self)

    def dumps(self) -> str:
        return dumps(self)

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. replace(**{"train.lr": 1e-3})."""
        flat = self.to_flat()
        for k, v in overrides.items():
            if k not in flat:
                raise InvalidConfig(f"unknown config key {k!r}")
            flat[k] = v
        return from_flat(flat)


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _section_types():
    return {name: f.default_factory().__class__ for name, f in SECTIONS.items()}


def all_keys() -> dict:
    """Every accepted dotted key mapped to its default value."""
    return to_flat(ExperimentConfig())


def to_flat(cfg: ExperimentConfig) -> dict:
    out = {}
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            out[f"{name}.{f.name}"] = getattr(section, f.name)
    return out


def _coerce(key, text, default):
    if not isinstance(text, str):
        return tuple(text) if isinstance(default, tuple) else text
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            sample = default[0] if default else ""
            if isinstance(sample, int) and not isinstance(sample, bool):
                return tuple(int(t) for t in items)
            if isinstance(sample, float):
                return tuple(float(t) for t in items)
            return tuple(items)
    except ValueError as exc:
        raise InvalidConfig(f"bad value for {key}: {text!r}") from exc
    return text


def from_flat(flat: dict) -> ExperimentConfig:
    defaults = all_keys()
    unknown = sorted(set(flat) - set(defaults))
    if unknown:
        raise InvalidConfig(f"unknown config keys: {unknown}")
    merged = dict(defaults)
    for k, v in flat.items():
        merged[k] = _coerce(k, v, defaults[k])
    kwargs = {}
    for name, cls in _section_types().items():
        prefix = name + "."
        kwargs[name] = cls(**{k[len(prefix):]: v for k, v in merged.items() if k.startswith(prefix)})
    return ExperimentConfig(**kwargs)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    current = None
    for k, v in to_flat(cfg).items():
        section = k.split(".", 1)[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {section}")
            current = section
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def parse_overrides(pairs) -> dict:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise InvalidConfig(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def loads(text: str, overrides=None) -> ExperimentConfig:
    flat = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value, got {line!r}")
        k, v = line.split("=", 1)
        flat[k.strip()] = v.strip()
    flat.update(overrides or {})
    return from_flat(flat)


def load(path, overrides=None) -> ExperimentConfig:
    with open(path) as fh:
        return loads(fh.read(), overrides)


def desk_config(**overrides) -> ExperimentConfig:
    """32x256 geometry, 8 low-res rows, compact networks: fits a CPU in minutes."""
    flat = {
        "geometry.height": 32, "geometry.width": 256,
        "geometry.fov_up": 3.0, "geometry.fov_down": -25.0,
        "data.lo_height": 8,
        "data.class_names": ("unlabeled", "ground", "building", "car", "person"),
        "unroll.denoiser_width": 8,
        "seg.num_classes": 5, "seg.stem_width": 16, "seg.widths": (16, 32, 48, 64),
        "seg.depths": (1, 1, 1, 1), "seg.decoder_widths": (48, 32, 16),
        "train.epochs": 50, "train.batch_size": 4, "train.val_fraction": 0.0,
    }
    flat.update(overrides)
    return from_flat(flat)
