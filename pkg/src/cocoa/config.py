"""Run configuration: JSON sections merged over defaults, then flag overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .baselines import RldConfig
from .errors import ConfigurationError
from .forward import NoiseModel, PhantomSpec
from .metrics import SbrConfig
from .optics import OpticalConfig, WavefrontAberration
from .solver import TrainConfig


@dataclass(frozen=True)
class NoiseSection:
    """Camera settings. ``offset`` is the pedestal added before 16-bit quantization."""

    enabled: bool = True
    gain: float = 1.0
    readout: float = 0.0
    offset: float = 100.0


@dataclass(frozen=True)
class ImagingSection:
    """Illumination (photons per unit structure per voxel), background and the sample aberration."""

    illumination: float = 100.0
    background: float = 10.0
    aberration: dict = field(default_factory=dict)

    def wavefront(self) -> WavefrontAberration:
        return WavefrontAberration.from_json_dict(self.aberration)


@dataclass(frozen=True)
class GsSection:
    iterations: int = 100
    snr_threshold: float = 10.0


@dataclass(frozen=True)
class MetricsSection:
    emd_projections: int = 200
    emd_p: int = 2
    sbr_sigma: float = 1.0
    sbr_background_sigma: float = 10.0


@dataclass(frozen=True)
class LoopSection:
    """Simulated correction loop: start from ``aberration`` if given, else a random mix."""

    rounds: int = 3
    rms: float = 0.15
    mode_set: str = "low"
    aberration: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SweepSpec:
    """Swept variable, its values and repeats per value.

    ``variable`` is ``"illumination"`` (SNR via photon budget) or ``"rms"``
    (aberration magnitude). ``mode_set`` is ``"low"``, ``"high"`` or a single
    ANSI index held fixed; for illumination sweeps the aberration is
    ``rms_fixed`` on that set. ``log_x`` fits cutoffs against ``log10(value)``.
    """

    variable: str = "rms"
    values: tuple = tuple(np.round(np.arange(0.0, 0.31 + 1e-9, 0.04), 10).tolist())
    repeats: int = 3
    mode_set: Any = "low"
    rms_fixed: float = 0.15
    log_x: bool = False

    def __post_init__(self):
        if self.variable not in ("illumination", "rms"):
            raise ConfigurationError(f"unknown sweep variable {self.variable!r}")
        values = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", values)
        if not values:
            raise ConfigurationError("sweep needs at least one value")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigurationError("sweep values must be strictly increasing")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if not (self.mode_set in ("low", "high") or isinstance(self.mode_set, int)):
            raise ConfigurationError("mode_set must be 'low', 'high' or an ANSI index")

    def modes(self):
        return self.mode_set if isinstance(self.mode_set, str) else (int(self.mode_set),)


SECTIONS = {
    "optical": OpticalConfig,
    "phantom": PhantomSpec,
    "noise": NoiseSection,
    "imaging": ImagingSection,
    "train": TrainConfig,
    "rld": RldConfig,
    "gs": GsSection,
    "metrics": MetricsSection,
    "loop": LoopSection,
    "sweep": SweepSpec,
}
# seeds are derived from the top-level seed so one number fixes a run
_DERIVED = {"phantom": ("seed",), "train": ("seed",)}


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(_coerce(v, default[0] if default else None) for v in value)
    return value


def _build(name: str, values: dict):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigurationError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(_DERIVED.get(name, ()))
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    default = cls()
    kwargs = {k: _coerce(v, getattr(default, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid section {name!r}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    """All sections of a run plus the global seed and output directory."""

    optical: OpticalConfig = OpticalConfig()
    phantom: PhantomSpec = PhantomSpec()
    noise: NoiseSection = NoiseSection()
    imaging: ImagingSection = ImagingSection()
    train: TrainConfig = TrainConfig()
    rld: RldConfig = RldConfig()
    gs: GsSection = GsSection()
    metrics: MetricsSection = MetricsSection()
    loop: LoopSection = LoopSection()
    sweep: SweepSpec = SweepSpec()
    seed: int = 0
    out: str = "out"

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "RunConfig":
        """Merge ``data`` then ``overrides`` (both nested dicts) over the defaults."""
        merged: dict = {}
        for source in (data or {}), (overrides or {}):
            if not isinstance(source, dict):
                raise ConfigurationError("configuration must be a JSON object")
            for key, value in source.items():
                if key in SECTIONS:
                    if not isinstance(value, dict):
                        raise ConfigurationError(f"section {key!r} must be an object")
                    merged.setdefault(key, {}).update(value)
                elif key in ("seed", "out"):
                    merged[key] = value
                else:
                    raise ConfigurationError(f"unknown top-level key {key!r}")
        seed = merged.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        sections = {name: _build(name, merged.get(name, {})) for name in SECTIONS}
        sections["phantom"] = dataclasses.replace(sections["phantom"], seed=seed)
        sections["train"] = dataclasses.replace(sections["train"], seed=seed)
        return cls(**sections, seed=seed, out=str(merged.get("out", "out")))

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigurationError(f"config file not found: {path}")
            try:
                data = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, overrides)

    def noise_model(self, seed_offset: int = 1) -> NoiseModel | None:
        if not self.noise.enabled:
            return None
        return NoiseModel(self.noise.gain, self.noise.readout, self.seed + seed_offset)

    def sbr_config(self) -> SbrConfig:
        return SbrConfig(self.metrics.sbr_sigma, self.metrics.sbr_background_sigma)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        for name, keys in _DERIVED.items():
            for k in keys:
                out[name].pop(k, None)
        out["seed"] = self.seed
        out["out"] = self.out
        return out

    def snapshot(self, path) -> Path:
        """Write the resolved configuration as JSON."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path
