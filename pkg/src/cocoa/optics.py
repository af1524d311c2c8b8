"""Zernike algebra, pupil sampling and scalar widefield PSF generation.

Zernike modes use ANSI single indexing, ``j = (n(n+2) + m) / 2``, and the
orthonormal (unit-RMS over the unit disk) normalization, so a coefficient is
directly the RMS wavefront contribution of its mode in units of wavelength.

The 3D PSF is the modulus squared of the 2D Fourier transform of the pupil
function multiplied by the angular-spectrum defocus kernel, evaluated for
every plane of the stack. :class:`PsfModel` keeps the computation in torch so
that the solver can differentiate it with respect to the Zernike
coefficients; :func:`psf_3d` is the NumPy-facing convenience wrapper.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, InvalidModeError

_MODE_NAMES = {
    0: "piston",
    1: "vertical tilt",
    2: "horizontal tilt",
    3: "oblique astigmatism",
    4: "defocus",
    5: "vertical astigmatism",
    6: "vertical trefoil",
    7: "vertical coma",
    8: "horizontal coma",
    9: "oblique trefoil",
    10: "oblique quadrafoil",
    11: "oblique secondary astigmatism",
    12: "primary spherical",
    13: "vertical secondary astigmatism",
    14: "vertical quadrafoil",
    15: "oblique pentafoil",
    16: "oblique secondary trefoil",
    17: "vertical secondary coma",
    18: "horizontal secondary coma",
    19: "vertical secondary trefoil",
    20: "vertical pentafoil",
}


@dataclass(frozen=True, order=True)
class ZernikeIndex:
    """A Zernike mode identified by radial order ``n`` and azimuthal frequency ``m``."""

    n: int
    m: int

    def __post_init__(self):
        n, m = self.n, self.m
        if n < 0 or abs(m) > n or (n - abs(m)) % 2:
            raise InvalidModeError(f"invalid Zernike mode (n={n}, m={m})")

    @property
    def j(self) -> int:
        return (self.n * (self.n + 2) + self.m) // 2

    @classmethod
    def from_j(cls, j: int) -> "ZernikeIndex":
        if j < 0:
            raise InvalidModeError(f"ANSI index must be non-negative, got {j}")
        n = int(math.ceil((-3 + math.sqrt(9 + 8 * j)) / 2))
        m = 2 * j - n * (n + 2)
        return cls(n, m)

    @property
    def name(self) -> str:
        return _MODE_NAMES.get(self.j, f"Z(n={self.n}, m={self.m})")


def ansi_index(n: int, m: int) -> ZernikeIndex:
    """Validate ``(n, m)`` and return its :class:`ZernikeIndex` (``.j`` is the ANSI index)."""
    return ZernikeIndex(int(n), int(m))


# primary astigmatism (j=3) through pentafoil (j=20), defocus (j=4) excluded
DEFAULT_MODE_INDICES = (3,) + tuple(range(5, 21))
DEFAULT_MODES = tuple(ZernikeIndex.from_j(j) for j in DEFAULT_MODE_INDICES)


def radial_polynomial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    """Unnormalized Zernike radial polynomial R_n^|m|(rho)."""
    m = abs(m)
    out = np.zeros_like(rho, dtype=float)
    for k in range((n - m) // 2 + 1):
        c = ((-1) ** k * math.factorial(n - k)
             / (math.factorial(k) * math.factorial((n + m) // 2 - k) * math.factorial((n - m) // 2 - k)))
        out += c * rho ** (n - 2 * k)
    return out


@dataclass(frozen=True)
class OpticalConfig:
    """Microscope and sampling parameters. Lengths in micrometers."""

    numerical_aperture: float = 1.1
    wavelength: float = 0.515
    refractive_index: float = 1.33
    lateral_pixel: float = 0.1
    axial_step: float = 0.2
    nx: int = 64
    ny: int = 64
    nz: int = 33

    def __post_init__(self):
        if not (self.numerical_aperture > 0 and self.wavelength > 0 and self.refractive_index > 0):
            raise ConfigurationError("NA, wavelength and refractive index must be positive")
        if self.numerical_aperture >= self.refractive_index:
            raise ConfigurationError(
                f"NA ({self.numerical_aperture}) must be below the refractive index ({self.refractive_index})")
        if self.lateral_pixel <= 0 or self.axial_step <= 0:
            raise ConfigurationError("voxel pitches must be positive")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ConfigurationError("grid sizes must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nz, self.ny, self.nx)

    @property
    def pitch(self) -> tuple[float, float, float]:
        return (self.axial_step, self.lateral_pixel, self.lateral_pixel)

    @property
    def cutoff_frequency(self) -> float:
        """Coherent cutoff NA/lambda (cycles/um); the incoherent OTF extends to twice this."""
        return self.numerical_aperture / self.wavelength

    @property
    def nyquist_pixel(self) -> float:
        return self.wavelength / (4 * self.numerical_aperture)

    def check_sampling(self) -> bool:
        """Warn (not raise) when the lateral pixel undersamples the intensity PSF."""
        if self.lateral_pixel > self.nyquist_pixel:
            warnings.warn(
                f"lateral pixel {self.lateral_pixel} um exceeds Nyquist limit "
                f"{self.nyquist_pixel:.4f} um; PSF will be aliased", stacklevel=2)
            return False
        return True

    def with_shape(self, shape: Sequence[int]) -> "OpticalConfig":
        nz, ny, nx = (int(s) for s in shape)
        return OpticalConfig(self.numerical_aperture, self.wavelength, self.refractive_index,
                             self.lateral_pixel, self.axial_step, nx, ny, nz)

    def z_positions(self) -> np.ndarray:
        """Axial plane positions relative to the focal plane at index ``nz // 2``."""
        return (np.arange(self.nz) - self.nz // 2) * self.axial_step


def focal_plane_index(nz: int) -> int:
    return nz // 2


@dataclass(frozen=True)
class PupilGrid:
    """Centered spatial-frequency sampling of the back pupil.

    ``xi`` varies along columns (x), ``eta`` along rows (y). ``rho`` and
    ``theta`` are normalized polar coordinates with ``rho == 1`` on the
    aperture edge.
    """

    xi: np.ndarray
    eta: np.ndarray
    cutoff: float

    @classmethod
    def from_config(cls, config: OpticalConfig) -> "PupilGrid":
        fx = (np.arange(config.nx) - config.nx // 2) / (config.nx * config.lateral_pixel)
        fy = (np.arange(config.ny) - config.ny // 2) / (config.ny * config.lateral_pixel)
        nyquist = 1.0 / (2 * config.lateral_pixel)
        cutoff = config.cutoff_frequency
        if cutoff >= nyquist:
            raise ConfigurationError(
                f"pupil radius NA/lambda={cutoff:.3f}/um does not fit the frequency grid "
                f"(Nyquist {nyquist:.3f}/um); reduce the lateral pixel")
        if cutoff * config.nx * config.lateral_pixel < 2 or cutoff * config.ny * config.lateral_pixel < 2:
            raise ConfigurationError("grid too small: aperture spans fewer than 2 frequency samples")
        eta, xi = np.meshgrid(fy, fx, indexing="ij")
        return cls(xi, eta, cutoff)

    @classmethod
    def unit_disk(cls, n: int) -> "PupilGrid":
        """``n x n`` pixel-centered sampling of the square circumscribing the unit disk."""
        c = (np.arange(n) + 0.5) / (n / 2) - 1.0
        eta, xi = np.meshgrid(c, c, indexing="ij")
        return cls(xi, eta, 1.0)

    @property
    def rho(self) -> np.ndarray:
        return np.hypot(self.xi, self.eta) / self.cutoff

    @property
    def theta(self) -> np.ndarray:
        return np.arctan2(self.eta, self.xi)

    @property
    def aperture(self) -> np.ndarray:
        return self.xi ** 2 + self.eta ** 2 <= self.cutoff ** 2


def zernike_eval(mode: ZernikeIndex, grid: PupilGrid, orthonormal: bool = True) -> np.ndarray:
    """Sample one Zernike mode on ``grid``; zero outside the aperture."""
    rho, theta, mask = grid.rho, grid.theta, grid.aperture
    z = radial_polynomial(mode.n, mode.m, rho)
    if mode.m > 0:
        z = z * np.cos(mode.m * theta)
    elif mode.m < 0:
        z = z * np.sin(-mode.m * theta)
    if orthonormal:
        z = z * math.sqrt((2 if mode.m else 1) * (mode.n + 1))
    return np.where(mask, z, 0.0)


@dataclass(frozen=True)
class ZernikeBasis:
    modes: tuple[ZernikeIndex, ...] = DEFAULT_MODES
    orthonormal: bool = True

    @classmethod
    def from_indices(cls, indices: Iterable[int], orthonormal: bool = True) -> "ZernikeBasis":
        return cls(tuple(ZernikeIndex.from_j(int(j)) for j in indices), orthonormal)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(m.j for m in self.modes)

    def __len__(self):
        return len(self.modes)

    def evaluate(self, grid: PupilGrid) -> np.ndarray:
        """Stack of sampled modes, shape ``(len(modes), ny, nx)``."""
        if not self.modes:
            return np.zeros((0,) + grid.xi.shape)
        return np.stack([zernike_eval(m, grid, self.orthonormal) for m in self.modes])

    def gram(self, grid: PupilGrid) -> np.ndarray:
        """Discrete inner products averaged over the aperture mask."""
        maps = self.evaluate(grid)[:, grid.aperture]
        return maps @ maps.T / maps.shape[1]


@dataclass
class WavefrontAberration:
    """Zernike coefficients in units of wavelength keyed by ANSI index."""

    coefficients: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        coeffs = {}
        for key, value in dict(self.coefficients).items():
            j = key.j if isinstance(key, ZernikeIndex) else int(key)
            ZernikeIndex.from_j(j)
            coeffs[j] = float(value)
        self.coefficients = coeffs

    @classmethod
    def from_vector(cls, indices: Sequence[int], values) -> "WavefrontAberration":
        return cls(dict(zip((int(j) for j in indices), np.asarray(values, dtype=float).tolist())))

    def vector(self, indices: Sequence[int]) -> np.ndarray:
        return np.array([self.coefficients.get(int(j), 0.0) for j in indices])

    def __getitem__(self, j: int) -> float:
        return self.coefficients.get(int(j), 0.0)

    def __add__(self, other: "WavefrontAberration") -> "WavefrontAberration":
        keys = sorted(set(self.coefficients) | set(other.coefficients))
        return WavefrontAberration({j: self[j] + other[j] for j in keys})

    def __neg__(self) -> "WavefrontAberration":
        return WavefrontAberration({j: -v for j, v in self.coefficients.items()})

    def __sub__(self, other: "WavefrontAberration") -> "WavefrontAberration":
        return self + (-other)

    def rms(self) -> float:
        return wavefront_rms(self)

    def to_json_dict(self) -> dict[str, float]:
        return {str(j): v for j, v in sorted(self.coefficients.items())}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, float]) -> "WavefrontAberration":
        return cls({int(k): float(v) for k, v in data.items()})


def wavefront_rms(aberration: WavefrontAberration) -> float:
    """RMS wavefront in waves; the l2 norm of the coefficients for an orthonormal basis."""
    return float(np.sqrt(sum(v * v for v in aberration.coefficients.values())))


def wavefront_phase(aberration: WavefrontAberration, grid: PupilGrid) -> np.ndarray:
    """Pupil phase map in radians, ``2 pi sum_j a_j Z_j``, zero outside the aperture."""
    phase = np.zeros(grid.xi.shape)
    for j, value in aberration.coefficients.items():
        if value:
            phase += value * zernike_eval(ZernikeIndex.from_j(j), grid)
    return 2 * np.pi * phase


class PsfModel:
    """Differentiable map from Zernike coefficients to a unit-sum 3D PSF.

    Parameters
    ----------
    config : OpticalConfig
        Defines the lateral grid (shared with the pupil) and the planes.
    basis : ZernikeBasis
        Modes addressed by the coefficient vector passed to ``__call__``.
    dtype : torch.dtype
        Real dtype; the complex fields use the matching complex dtype.
    """

    def __init__(self, config: OpticalConfig, basis: ZernikeBasis = ZernikeBasis(),
                 dtype: torch.dtype = torch.float64):
        self.config = config
        self.basis = basis
        grid = PupilGrid.from_config(config)
        self.grid = grid
        self.dtype = dtype
        self.aperture = torch.as_tensor(grid.aperture, dtype=dtype)
        self.modes = torch.as_tensor(basis.evaluate(grid), dtype=dtype)
        k2 = (config.refractive_index / config.wavelength) ** 2 - grid.xi ** 2 - grid.eta ** 2
        # evanescent components: phase frozen, amplitude kept
        kz = np.sqrt(np.clip(k2, 0.0, None))
        z = config.z_positions()
        defocus = np.exp(-2j * np.pi * z[:, None, None] * kz[None])
        cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        self.defocus = torch.as_tensor(defocus, dtype=cdtype)
        self.focal_plane_index = focal_plane_index(config.nz)

    def phase(self, coeffs: torch.Tensor) -> torch.Tensor:
        coeffs = torch.as_tensor(coeffs, dtype=self.dtype)
        return 2 * np.pi * torch.tensordot(coeffs, self.modes, dims=1)

    def pupil(self, coeffs: torch.Tensor) -> torch.Tensor:
        return self.aperture * torch.exp(1j * self.phase(coeffs))

    def __call__(self, coeffs, normalize: bool = True) -> torch.Tensor:
        field = self.pupil(coeffs)[None] * self.defocus
        field = torch.fft.ifftshift(field, dim=(-2, -1))
        amp = torch.fft.fftshift(torch.fft.fft2(field), dim=(-2, -1))
        h = amp.real ** 2 + amp.imag ** 2
        if normalize:
            h = h / h.sum()
        return h


def psf_3d(config: OpticalConfig, aberration: WavefrontAberration | None = None,
           normalize: bool = True) -> np.ndarray:
    """Widefield 3D PSF (nz, ny, nx) for ``aberration``; focal plane at ``nz // 2``."""
    config.check_sampling()
    aberration = aberration or WavefrontAberration()
    indices = sorted(aberration.coefficients)
    model = PsfModel(config, ZernikeBasis.from_indices(indices))
    coeffs = torch.as_tensor(aberration.vector(indices), dtype=torch.float64)
    return model(coeffs, normalize=normalize).numpy()
