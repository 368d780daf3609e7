"""Run configuration: every threshold in one TOML file."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli
import tomli_w

from .mapping import MapPolicy
from .optim import OptimConfig
from .preproc import FilterChain, default_chain


class ConfigError(ValueError):
    pass


@dataclass
class FeatureConfig:
    backend: str = "synthetic"  # synthetic | sift | torchscript
    matcher: str = "auto"  # auto | landmark | descriptor | torchscript
    max_features: int = 1000
    detector_model: str = ""
    matcher_model: str = ""
    descriptor_dim: int = 32
    lowe_ratio: float = 0.85
    sim_threshold: float = 0.7
    search_radius: float = 8.0


@dataclass
class GeometryConfig:
    ransac_threshold_px: float = 1.5
    ransac_max_iters: int = 1000
    ransac_confidence: float = 0.999
    magsac_sigmas_px: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    lo_iters: int = 10
    refine_starts: int = 10
    epipolar_threshold_px: float = 2.0


@dataclass
class TrackingConfig:
    min_init_matches: int = 50
    max_init_gap: float = 1.0
    min_init_parallax_deg: float = 1.0
    min_track_inliers: int = 15
    lost_patience: int = 5
    weighting: str = "confidence"  # confidence | uniform
    local_ba_window: int = 10
    seed: int = 0


@dataclass
class PipelineConfig:
    chain: FilterChain = field(default_factory=default_chain)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    map: MapPolicy = field(default_factory=MapPolicy)
    optim: OptimConfig = field(default_factory=OptimConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def validate(self) -> "PipelineConfig":
        for section in (self.features, self.geometry, self.map, self.optim, self.tracking):
            for f in fields(section):
                v = getattr(section, f.name)
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    continue
                if f.name in ("seed",):
                    continue
                if v <= 0:
                    raise ConfigError(f"{type(section).__name__}.{f.name} must be positive, got {v}")
        if self.tracking.weighting not in ("confidence", "uniform"):
            raise ConfigError(f"unknown weighting {self.tracking.weighting!r}")
        if self.map.rotation_metric not in ("euler", "geodesic"):
            raise ConfigError(f"unknown rotation metric {self.map.rotation_metric!r}")
        if self.optim.linear_solver not in ("schur", "dense"):
            raise ConfigError(f"unknown linear solver {self.optim.linear_solver!r}")
        return self

    def to_dict(self) -> dict:
        out = {"chain": self.chain.to_list()}
        for name in ("features", "geometry", "map", "optim", "tracking"):
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - {"chain", "features", "geometry", "map", "optim", "tracking"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        kwargs = {}
        if "chain" in d:
            try:
                kwargs["chain"] = FilterChain.from_list(d["chain"])
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"bad filter chain: {exc}") from exc
        for f in fields(cls):
            if f.name == "chain" or f.name not in d:
                continue
            kwargs[f.name] = _section(f.default_factory, d[f.name])
        return cls(**kwargs).validate()

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.loads(Path(path).read_text())


def _section(factory, values: dict):
    base = factory()
    assert is_dataclass(base)
    names = {f.name for f in fields(base)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{type(base).__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        cur = getattr(base, k)
        if isinstance(cur, tuple):
            v = tuple(v)
        elif isinstance(cur, float) and isinstance(v, int):
            v = float(v)
        kwargs[k] = v
    return type(base)(**{**asdict(base), **kwargs})
