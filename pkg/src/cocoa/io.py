"""File formats: multi-page TIFF stacks with JSON sidecars, aberration JSON."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import tifffile

from .errors import InputError
from .optics import WavefrontAberration

ABERRATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Zernike aberration (ANSI index -> coefficient in waves)",
    "type": "object",
    "patternProperties": {"^(0|[1-9][0-9]*)$": {"type": "number"}},
    "additionalProperties": False,
}


@dataclass
class ImageStack:
    """A 3D stack with voxel pitch ``(dz, dy, dx)`` in micrometers and free-form metadata.

    Camera-like stacks carry ``gain``, ``readout_noise`` and ``offset`` in
    ``metadata``; ``offset`` is the constant pedestal added before 16-bit
    quantization.
    """

    values: np.ndarray
    pitch: tuple[float, float, float] = (1.0, 1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    def photons(self) -> np.ndarray:
        """Pixel values with the camera pedestal removed (still in pixel units)."""
        return np.asarray(self.values, dtype=np.float64) - float(self.metadata.get("offset", 0.0))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_stack(path, stack: ImageStack, dtype: str = "float32") -> Path:
    """Write ``stack`` as a multi-page TIFF plus ``<name>.json`` sidecar."""
    path = Path(path)
    values = np.asarray(stack.values)
    if dtype == "uint16":
        data = np.clip(np.rint(values), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    elif dtype == "float32":
        data = values.astype(np.float32)
    else:
        raise ValueError(f"unsupported TIFF dtype {dtype!r}")
    tifffile.imwrite(path, data, photometric="minisblack", metadata=None)
    meta = {"shape": list(data.shape), "dtype": dtype, "pitch": [float(p) for p in stack.pitch]}
    meta.update(stack.metadata)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_stack(path) -> ImageStack:
    path = Path(path)
    if not path.exists():
        raise InputError(f"stack not found: {path}")
    values = tifffile.imread(path)
    if values.ndim == 2:
        values = values[None]
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    pitch = tuple(meta.pop("pitch", (1.0, 1.0, 1.0)))
    meta.pop("shape", None)
    meta.pop("dtype", None)
    return ImageStack(values.astype(np.float64), pitch, meta)


def validate_aberration_json(data) -> None:
    try:
        jsonschema.validate(data, ABERRATION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InputError(f"invalid aberration JSON: {exc.message}") from None


def write_aberration(path, aberration: WavefrontAberration) -> Path:
    path = Path(path)
    data = aberration.to_json_dict()
    validate_aberration_json(data)
    path.write_text(json.dumps(data, indent=2) + "\n")
    return path


def read_aberration(path) -> WavefrontAberration:
    path = Path(path)
    if not path.exists():
        raise InputError(f"aberration file not found: {path}")
    data = json.loads(path.read_text())
    validate_aberration_json(data)
    return WavefrontAberration.from_json_dict(data)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
