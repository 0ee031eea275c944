"""Pipeline configuration: every tunable in one place, loaded from JSON with
exhaustive key validation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .register import GicpConfig


class ConfigError(ValueError):
    pass


@dataclass
class DbscanConfig:
    eps: float = 0.8
    min_pts: int = 5


@dataclass
class GroundConfig:
    tile_m: float = 5.0
    inlier_m: float = 0.20
    max_tilt_deg: float = 15.0
    iterations: int = 30
    max_step_m: float = 0.5


@dataclass
class AnomalyConfig:
    cell_m: float = 0.5
    residual_m: float = 0.15
    min_cells: int = 2
    trim_m: float = 0.10  # robust refit; independent of residual_m


@dataclass
class TrackConfig:
    gate_m: float = 2.0
    max_miss: int = 3
    min_lifetime: int = 5
    road_margin_m: float = 1.0
    voxel_m: float = 0.1  # GICP source/target downsampling
    # registration corrections below these are treated as zero
    min_correction_m: float = 0.01
    min_correction_rad: float = 0.002
    # and above these are implausible within one frame
    max_correction_m: float = 0.3
    max_correction_rad: float = 0.05
    max_tilt_rad: float = 0.02
    significance: float = 0.01  # F-test level for accepting a correction
    min_normal_cos: float = 0.7  # source/aggregate surface agreement


@dataclass
class FuseConfig:
    overlap_frac: float = 0.5
    merge_dist_m: float = 1.0
    max_extent_m: float = 6.0
    min_extent_m: float = 0.05  # floor for degenerate cuboids
    support_voxel_m: float = 0.2
    min_support_frames: int = 2


@dataclass
class MaskprocConfig:
    min_area_px: int = 9
    max_area_px: int | None = None  # None: a quarter of the image


@dataclass
class PipelineConfig:
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    gicp: GicpConfig = field(default_factory=GicpConfig)
    ground: GroundConfig = field(default_factory=GroundConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    maskproc: MaskprocConfig = field(default_factory=MaskprocConfig)

    def validate(self) -> None:
        for section in fields(self):
            sub = getattr(self, section.name)
            for f in fields(sub):
                val = getattr(sub, f.name)
                key = f"{section.name}.{f.name}"
                if val is None and key == "maskproc.max_area_px":
                    continue
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{key} must be a number")
                if f.type in ("int", int, "int | None") and not float(val).is_integer():
                    raise ConfigError(f"{key} must be an integer")
                if not val > 0:
                    raise ConfigError(f"{key} must be positive")
        if not self.fuse.overlap_frac <= 1:
            raise ConfigError("fuse.overlap_frac must lie in (0, 1]")
        if not self.track.min_normal_cos <= 1:
            raise ConfigError("track.min_normal_cos must lie in (0, 1]")
        if not self.track.significance < 1:
            raise ConfigError("track.significance must lie in (0, 1)")
        if self.ground.max_tilt_deg >= 90:
            raise ConfigError("ground.max_tilt_deg must be below 90")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> PipelineConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        sections = {f.name: f for f in fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, f in sections.items():
            sub_cls = type(f.default_factory())
            sub_doc = doc.get(name, {})
            if not isinstance(sub_doc, dict):
                raise ConfigError(f"{name} must be an object")
            allowed = {g.name for g in fields(sub_cls)}
            bad = set(sub_doc) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = sub_cls(**sub_doc)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None) -> PipelineConfig:
        if path is None:
            cfg = cls()
            cfg.validate()
            return cfg
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e.msg} at offset {e.pos}") from e
        return cls.from_dict(doc)
