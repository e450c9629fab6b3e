"""JSON scenario configuration: parsing with field-path errors and a fully resolved echo."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, NVStrainError
from .fitting import FitConfig
from .simulator import BackgroundModel, GrainBoundaryModel, Optics, Scene, random_nvs
from .spin_model import DEFAULT_CONSTANTS, PhysicalConstants


@dataclass
class SceneConfig:
    extent: tuple = (40.96, 40.96, 0.0)  # um
    nv_density: float = 50.0  # per um^2
    nv_seed: int = 0
    class_fractions: tuple = (0.25, 0.25, 0.25, 0.25)
    class_regions: Optional[list] = None  # [[x_max_um, class], ...]
    brightness_spread: float = 0.0
    z_range: Optional[tuple] = None  # um
    pixel_size: float = 80.0  # nm
    z_slices: tuple = (0.0,)
    line_hwhm: float = 0.5  # MHz
    line_depth: float = 0.02
    hyperfine: bool = False
    class_nonaxial_scale: tuple = (1.0, 1.0, 1.0, 1.0)
    merge_unresolved: bool = True
    strain: dict = field(default_factory=dict)  # GrainBoundaryModel fields
    background: dict = field(default_factory=dict)  # BackgroundModel fields
    optics: dict = field(default_factory=dict)  # Optics fields


@dataclass
class FrequencyAxisConfig:
    start: float = 2.858  # GHz
    stop: float = 2.874
    points: int = 100

    def axis(self) -> np.ndarray:
        """Evenly spaced axis in GHz, snapped to whole Hz as stored in stack files."""
        return np.rint(np.linspace(self.start, self.stop, self.points) * 1e9) / 1e9


@dataclass
class AcquisitionConfig:
    mode: str = "low-field"  # or "high-field"
    frequency_axis: FrequencyAxisConfig = field(default_factory=FrequencyAxisConfig)
    total_time: float = 150.0  # s
    photon_rate: float = 1000.0  # photons/s per unit-brightness NV
    seed: Optional[int] = None
    noise: bool = True
    b_lab: tuple = (0.0, 0.0, 0.0)  # G, high-field mode
    resolution: float = 1e-3  # GHz, line merge tolerance in high-field mode


@dataclass
class MapConfig:
    bin_factor: int = 4
    smooth: bool = True
    smooth_neighbors: int = 4
    reference_d: Optional[float] = None  # GHz; defaults to the zero-strain splitting


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    scene: SceneConfig = field(default_factory=SceneConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    fit: dict = field(default_factory=dict)  # FitConfig fields
    map: MapConfig = field(default_factory=MapConfig)
    constants: dict = field(default_factory=dict)  # PhysicalConstants overrides
    calibration: dict = field(default_factory=dict)  # free-form provenance notes

    def physical_constants(self) -> PhysicalConstants:
        return dataclasses.replace(DEFAULT_CONSTANTS, **self.constants)

    def fit_config(self) -> FitConfig:
        return FitConfig(**self.fit)

    def build_scene(self) -> Scene:
        s = self.scene
        pos, cls, bri = random_nvs(s.extent, s.nv_density, s.nv_seed, s.class_fractions,
                                   s.class_regions, s.brightness_spread, s.z_range)
        return Scene(
            extent=tuple(s.extent), nv_positions=pos, nv_classes=cls, nv_brightness=bri,
            strain_model=GrainBoundaryModel(**s.strain),
            background=BackgroundModel(**s.background), optics=Optics(**s.optics),
            pixel_size=s.pixel_size, z_slices=tuple(s.z_slices), line_hwhm=s.line_hwhm,
            line_depth=s.line_depth, hyperfine=s.hyperfine,
            class_nonaxial_scale=tuple(s.class_nonaxial_scale),
            merge_unresolved=s.merge_unresolved, constants=self.physical_constants())

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


# nested free-form dicts are checked against these dataclasses
_DICT_SCHEMAS = {
    ("scene", "strain"): GrainBoundaryModel,
    ("scene", "background"): BackgroundModel,
    ("scene", "optics"): Optics,
    ("fit",): FitConfig,
    ("constants",): PhysicalConstants,
}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, np.generic):
        return v.item()
    return v


def _coerce(value, default, path):
    """Convert a JSON value to the type of ``default`` (None defaults accept anything)."""
    if value == "inf":
        value = math.inf
    if default is None:
        return tuple(value) if isinstance(value, list) and path.endswith("z_range") else value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _from_dict(cls, data, path: str, keys: tuple = ()):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kwargs = {}
    for name, f in known.items():
        sub = f"{path}.{name}" if path else name
        if name not in data:
            continue
        value = data[name]
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, sub, keys + (name,))
        elif isinstance(default, dict):
            schema = _DICT_SCHEMAS.get(keys + (name,))
            if schema is not None:
                value = _check_dict(schema, value, sub)
            kwargs[name] = value
        else:
            kwargs[name] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, NVStrainError) as e:
        raise ConfigError(path or "<root>", str(e)) from e


def _check_dict(schema, value, path):
    if not isinstance(value, dict):
        raise ConfigError(path, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(schema)}
    out = {}
    for k, v in value.items():
        if k not in fields:
            raise ConfigError(f"{path}.{k}", "unknown field")
        d = fields[k].default
        out[k] = _coerce(v, None if d is dataclasses.MISSING else d, f"{path}.{k}")
    try:
        schema(**out)
    except (TypeError, ValueError, NVStrainError) as e:
        raise ConfigError(path, str(e)) from e
    return out


def resolve(cfg: ScenarioConfig) -> dict:
    """Config with every default materialised, suitable for re-running."""
    d = cfg.to_dict()
    for keys, schema in _DICT_SCHEMAS.items():
        node = d
        for k in keys[:-1]:
            node = node[k]
        full = _plain(dataclasses.asdict(schema(**_from_plain(node[keys[-1]]))))
        node[keys[-1]] = full
    return d


def _from_plain(d: dict) -> dict:
    return {k: (math.inf if v == "inf" else tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def parse_config(data: Any) -> ScenarioConfig:
    return _from_dict(ScenarioConfig, data, "")


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read: {e.strerror}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON at line {e.lineno}: {e.msg}") from e
    return parse_config(data)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
