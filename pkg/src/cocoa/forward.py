"""Image formation, sensor noise, phantoms and correction arithmetic.

Convolution is linear (zero padded, not circular): the full convolution of a
structure with a centered PSF is cropped back to the requested field of
view. The PSF center is index ``K // 2`` along each axis, matching the layout
produced by :func:`cocoa.optics.psf_3d`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.fft import next_fast_len

from .errors import DomainError, GenerationError, ShapeError
from .optics import DEFAULT_MODES, OpticalConfig, WavefrontAberration

__all__ = [
    "convolve_3d", "adjoint_convolve_3d", "Convolver", "NoiseModel", "apply_noise",
    "PhantomSpec", "make_phantom", "compose_correction", "random_mixed_aberration",
    "LOW_ORDER_MODES", "HIGH_ORDER_MODES", "simulate_stack",
]


def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _fft_shape(a_shape, k_shape):
    return tuple(next_fast_len(a + k - 1, real=True) for a, k in zip(a_shape, k_shape))


def _crop(full: torch.Tensor, start: Sequence[int], shape: Sequence[int]) -> torch.Tensor:
    index = tuple(slice(s, s + n) for s, n in zip(start, shape))
    return full[index]


def _check_shapes(structure_shape, kernel_shape, out_shape):
    if len(structure_shape) != 3 or len(kernel_shape) != 3 or len(out_shape) != 3:
        raise ShapeError("convolution operands must be 3D")
    for s, o in zip(structure_shape, out_shape):
        if o > s or (s - o) % 2:
            raise ShapeError(
                f"output shape {tuple(out_shape)} must be centered inside structure {tuple(structure_shape)}")


def convolve_3d(structure, psf, out_shape: Sequence[int] | None = None):
    """Linear 3D convolution ``structure * psf`` cropped to ``out_shape``.

    ``out_shape`` defaults to the structure shape; a smaller, centered output
    lets the structure carry a margin around the imaged field of view.
    Accepts NumPy arrays (returns NumPy) or torch tensors (differentiable).
    """
    s, s_np = _to_tensor(structure)
    h, h_np = _to_tensor(psf)
    out_shape = tuple(out_shape or s.shape)
    _check_shapes(s.shape, h.shape, out_shape)
    size = _fft_shape(s.shape, h.shape)
    full = torch.fft.irfftn(torch.fft.rfftn(s, size) * torch.fft.rfftn(h.to(s.dtype), size), size)
    start = [k // 2 + (n - o) // 2 for k, n, o in zip(h.shape, s.shape, out_shape)]
    out = _crop(full, start, out_shape)
    return out.numpy() if (s_np and h_np) else out


def adjoint_convolve_3d(image, psf, structure_shape: Sequence[int] | None = None):
    """Adjoint of :func:`convolve_3d`: correlation with the PSF, embedded in ``structure_shape``."""
    y, y_np = _to_tensor(image)
    h, h_np = _to_tensor(psf)
    structure_shape = tuple(structure_shape or y.shape)
    _check_shapes(structure_shape, h.shape, y.shape)
    margin = [(n - o) // 2 for n, o in zip(structure_shape, y.shape)]
    flipped = torch.flip(h.to(y.dtype), dims=(0, 1, 2))
    size = _fft_shape(structure_shape, h.shape)
    full = torch.fft.irfftn(torch.fft.rfftn(y, size) * torch.fft.rfftn(flipped, size), size)
    # output index p collects y[i] with i = p - margin - K//2 + k for flipped tap k
    start = [k - 1 - k // 2 - m for k, m in zip(h.shape, margin)]
    out = _roll_crop(full, start, structure_shape)
    return out.numpy() if (y_np and h_np) else out


def _roll_crop(full, start, shape):
    # negative starts wrap into the zero-padded tail of the FFT buffer
    for axis, s in enumerate(start):
        if s < 0:
            full = torch.roll(full, -s, dims=axis)
    start = [max(s, 0) for s in start]
    return _crop(full, start, shape)


class Convolver:
    """Repeated convolution with a fixed PSF, caching its transform.

    Used by iterative deconvolution where the same kernel is applied
    hundreds of times.
    """

    def __init__(self, psf, shape: Sequence[int]):
        h, _ = _to_tensor(psf)
        self.shape = tuple(shape)
        _check_shapes(self.shape, h.shape, self.shape)
        self.kernel_shape = tuple(h.shape)
        self.size = _fft_shape(self.shape, h.shape)
        self._otf = torch.fft.rfftn(h, self.size)
        self._otf_adj = torch.fft.rfftn(torch.flip(h, dims=(0, 1, 2)), self.size)
        self._start = [k // 2 for k in h.shape]
        self._adj_start = [k - 1 - k // 2 for k in h.shape]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        full = torch.fft.irfftn(torch.fft.rfftn(x, self.size) * self._otf, self.size)
        return _crop(full, self._start, self.shape)

    def adjoint(self, y: torch.Tensor) -> torch.Tensor:
        full = torch.fft.irfftn(torch.fft.rfftn(y, self.size) * self._otf_adj, self.size)
        return _crop(full, self._adj_start, self.shape)


@dataclass(frozen=True)
class NoiseModel:
    """Camera model: pixel = gain * Poisson(photons) + Normal(0, readout)."""

    gain: float = 1.0
    readout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.gain > 0:
            raise DomainError("gain must be positive")
        if self.readout < 0:
            raise DomainError("readout noise must be non-negative")


_NORMAL_APPROX_MEAN = 1e4


def apply_noise(expected_photons, noise: NoiseModel) -> np.ndarray:
    """Draw a noisy camera frame/stack from expected photon counts."""
    lam = np.asarray(expected_photons, dtype=np.float64)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise DomainError("expected photon counts must be finite and non-negative")
    rng = np.random.default_rng(noise.seed)
    counts = np.empty_like(lam)
    large = lam > _NORMAL_APPROX_MEAN
    counts[~large] = rng.poisson(lam[~large])
    if large.any():
        counts[large] = np.rint(lam[large] + np.sqrt(lam[large]) * rng.standard_normal(int(large.sum())))
    pixels = noise.gain * counts
    if noise.readout > 0:
        pixels = pixels + rng.normal(0.0, noise.readout, size=lam.shape)
    return pixels


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic specimen description.

    ``volume_fraction`` applies to beads; filaments are controlled by
    ``filament_count``, ``filament_radius``, ``curvature`` and ``spine_density``
    (spines per micrometer of filament).
    """

    kind: str = "beads"
    bead_diameter: float = 0.5
    volume_fraction: float = 1e-3
    filament_count: int = 3
    filament_radius: float = 0.35
    curvature: float = 0.3
    spine_density: float = 0.0
    brightness: float = 1.0
    background: float = 0.0
    margin: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("beads", "filaments"):
            raise DomainError(f"unknown phantom kind {self.kind!r}")
        if not 0 <= self.volume_fraction <= 0.05:
            raise DomainError("volume fraction must lie in [0, 0.05]")
        if self.bead_diameter <= 0 or self.filament_radius <= 0:
            raise DomainError("feature sizes must be positive")


_SUPERSAMPLE = 3
_MAX_PLACEMENT_TRIES = 200


def make_phantom(spec: PhantomSpec, config: OpticalConfig) -> np.ndarray:
    """Rasterize a bead or filament phantom on the grid of ``config`` (float32)."""
    rng = np.random.default_rng(spec.seed)
    shape = config.shape
    if spec.kind == "beads":
        occupancy = _beads(spec, config, rng)
    else:
        occupancy = _filaments(spec, config, rng)
    volume = spec.brightness * occupancy + spec.background
    return volume.astype(np.float32).reshape(shape)


def _sphere_occupancy(center, radius, pitch, shape):
    """Antialiased (3x supersampled) occupancy of one sphere, as (slices, block)."""
    lo = [max(int(np.floor((c - radius) / p)), 0) for c, p in zip(center, pitch)]
    hi = [min(int(np.ceil((c + radius) / p)) + 1, n) for c, p, n in zip(center, pitch, shape)]
    if any(h <= l for l, h in zip(lo, hi)):
        return None, None
    offsets = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    axes = [((np.arange(l, h)[:, None] + offsets[None]) * p).ravel() - c
            for l, h, p, c in zip(lo, hi, pitch, center)]
    dz, dy, dx = np.meshgrid(*axes, indexing="ij", sparse=True)
    inside = (dz ** 2 + dy ** 2 + dx ** 2) <= radius ** 2
    counts = [h - l for l, h in zip(lo, hi)]
    occ = inside.reshape(counts[0], _SUPERSAMPLE, counts[1], _SUPERSAMPLE, counts[2], _SUPERSAMPLE)
    occ = occ.mean(axis=(1, 3, 5))
    return tuple(slice(l, h) for l, h in zip(lo, hi)), occ


def _beads(spec, config, rng):
    shape = config.shape
    pitch = np.array(config.pitch)
    extent = pitch * np.array(shape)
    radius = spec.bead_diameter / 2
    target_volume = spec.volume_fraction * np.prod(extent)
    n_beads = int(round(target_volume / (4 / 3 * np.pi * radius ** 3)))
    occupancy = np.zeros(shape, dtype=np.float64)
    lo = np.full(3, radius + spec.margin)
    hi = extent - radius - spec.margin
    if n_beads and np.any(hi <= lo):
        raise GenerationError("volume too small for the requested bead size and margin")
    centers = []
    for _ in range(n_beads):
        for _attempt in range(_MAX_PLACEMENT_TRIES):
            c = lo + rng.random(3) * (hi - lo)
            if all(np.sum((c - o) ** 2) >= (2 * radius) ** 2 for o in centers):
                break
        else:
            raise GenerationError(
                f"could not place {n_beads} non-overlapping beads after {_MAX_PLACEMENT_TRIES} tries")
        centers.append(c)
        index, occ = _sphere_occupancy(c, radius, pitch, shape)
        if index is not None:
            occupancy[index] = np.maximum(occupancy[index], occ)
    return occupancy


def _filaments(spec, config, rng):
    """Smooth random tubes with optional spine-like side protrusions."""
    shape = config.shape
    pitch = np.array(config.pitch)
    extent = pitch * np.array(shape)
    step = 0.5 * pitch.min()
    lines = []
    for _ in range(spec.filament_count):
        p = rng.random(3) * extent
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        # start outside the volume and walk through it
        p = p - d * extent.max()
        n_steps = int(3 * extent.max() / step)
        pts = np.empty((n_steps, 3))
        for i in range(n_steps):
            d = d + spec.curvature * step * rng.standard_normal(3)
            d /= np.linalg.norm(d)
            p = p + step * d
            pts[i] = p
        lines.append(pts)
        if spec.spine_density > 0:
            inside = np.all((pts >= 0) & (pts < extent), axis=1)
            length = inside.sum() * step
            for _ in range(rng.poisson(spec.spine_density * length)):
                base = pts[rng.choice(np.flatnonzero(inside))] if inside.any() else pts[0]
                out = rng.standard_normal(3)
                out /= np.linalg.norm(out)
                neck = base + np.outer(np.linspace(0, 1.0, 12), out * rng.uniform(0.6, 1.2))
                lines.append(neck)
    centerline = np.zeros(shape, dtype=bool)
    for pts in lines:
        idx = np.floor(pts / pitch).astype(int)
        ok = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
        centerline[tuple(idx[ok].T)] = True
    if not centerline.any():
        return np.zeros(shape)
    dist = ndimage.distance_transform_edt(~centerline, sampling=pitch)
    # linear ramp over one voxel width gives antialiased edges
    width = pitch.min()
    return np.clip((spec.filament_radius - dist) / width + 0.5, 0.0, 1.0)


def compose_correction(sample: WavefrontAberration, corrective: WavefrontAberration) -> WavefrontAberration:
    """Residual aberration after applying a corrective wavefront (coefficient-wise sum)."""
    return sample + corrective


LOW_ORDER_MODES = tuple(m.j for m in DEFAULT_MODES if 2 <= m.n <= 4)
HIGH_ORDER_MODES = tuple(m.j for m in DEFAULT_MODES if m.n == 5)


def random_mixed_aberration(rms_target: float, mode_set="low", seed=None) -> WavefrontAberration:
    """Random aberration on the low- (2<=n<=4) or high-order (n=5) set, l2-norm ``rms_target``.

    ``mode_set`` may also be an explicit sequence of ANSI indices.
    """
    if rms_target < 0:
        raise DomainError("rms_target must be non-negative")
    if isinstance(mode_set, str):
        try:
            indices = {"low": LOW_ORDER_MODES, "high": HIGH_ORDER_MODES}[mode_set]
        except KeyError:
            raise DomainError(f"unknown mode set {mode_set!r}") from None
    else:
        indices = tuple(int(j) for j in mode_set)
    if 4 in indices:
        raise DomainError("defocus is not part of the aberration basis")
    rng = np.random.default_rng(seed)
    if rms_target == 0:
        return WavefrontAberration({j: 0.0 for j in indices})
    values = rng.uniform(-1.0, 1.0, len(indices))
    values *= rms_target / np.linalg.norm(values)
    return WavefrontAberration.from_vector(indices, values)


def simulate_stack(structure, config: OpticalConfig, aberration: WavefrontAberration | None = None,
                   illumination: float = 100.0, background: float = 0.0,
                   noise: NoiseModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Expected photons ``illumination * (structure * psf) + background`` and a noisy draw.

    Returns ``(clean, noisy)``; ``noisy`` is ``gain * clean`` when ``noise`` is None.
    """
    from .optics import psf_3d

    psf = psf_3d(config.with_shape(np.shape(structure)), aberration)
    clean = illumination * np.clip(convolve_3d(np.asarray(structure, dtype=np.float64), psf), 0, None)
    clean = clean + background
    if noise is None:
        return clean, clean.copy()
    return clean, apply_noise(clean, noise)
