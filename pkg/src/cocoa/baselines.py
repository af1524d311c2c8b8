"""Richardson-Lucy deconvolution (non-blind and blind) and Gerchberg-Saxton phase retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
from scipy.fft import next_fast_len

from .errors import ConfigurationError, InputError, NumericalError
from .forward import Convolver
from .optics import (OpticalConfig, PupilGrid, WavefrontAberration, ZernikeBasis,
                     focal_plane_index, psf_3d)


@dataclass(frozen=True)
class RldConfig:
    """Richardson-Lucy settings.

    ``epsilon`` is relative to the stack maximum and floors the denominator of
    the ratio ``g / (h * s)``.
    """

    iterations: int = 500
    psf_iterations: int = 100
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1 or self.psf_iterations < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")


def _check_stack(stack):
    g = torch.as_tensor(np.asarray(stack, dtype=np.float64))
    if g.ndim != 3:
        raise InputError("deconvolution expects a 3D stack")
    if torch.any(g < 0):
        raise InputError("stack must be non-negative")
    return g


def _rl_iterations(g, conv: Convolver, s, iterations, eps, norm=None):
    if norm is None:
        norm = torch.clamp(conv.adjoint(torch.ones_like(g)), min=eps)
    for it in range(iterations):
        blurred = conv.forward(s)
        ratio = g / torch.clamp(blurred, min=eps)
        s = s * conv.adjoint(ratio) / norm
        s = torch.clamp(s, min=0.0)
        if not torch.all(torch.isfinite(s)):
            raise NumericalError(f"non-finite estimate at iteration {it}", iteration=it)
    return s


def rld_nonblind(stack, psf, config: RldConfig = RldConfig(), initial=None) -> np.ndarray:
    """Richardson-Lucy deconvolution with a known PSF.

    Each update multiplies the estimate by the PSF-correlated ratio of data
    to re-blurred estimate, divided by the correlated all-ones image (which is
    1 away from the borders for a unit-sum PSF). Convolutions are linear with
    the same centering and cropping as :func:`cocoa.forward.convolve_3d`.
    """
    g = _check_stack(stack)
    h = torch.as_tensor(np.asarray(psf, dtype=np.float64))
    eps = config.epsilon * float(g.max()) if float(g.max()) > 0 else config.epsilon
    conv = Convolver(h, g.shape)
    s = g.clone() if initial is None else torch.as_tensor(np.asarray(initial, dtype=np.float64))
    return _rl_iterations(g, conv, s, config.iterations, eps).numpy()


def _center_crop(volume: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    index = []
    for n, k in zip(volume.shape, shape):
        if k > n:
            raise ConfigurationError(f"PSF shape {tuple(shape)} exceeds {volume.shape}")
        start = n // 2 - k // 2
        index.append(slice(start, start + k))
    return volume[tuple(index)]


def _psf_update(g, s, h, eps):
    """One multiplicative RL step on the PSF with the object held fixed."""
    shape = g.shape
    k_shape = h.shape
    size = tuple(next_fast_len(n + k - 1, real=True) for n, k in zip(shape, k_shape))
    S = torch.fft.rfftn(s, size)
    start = [k // 2 for k in k_shape]
    full = torch.fft.irfftn(S * torch.fft.rfftn(h, size), size)
    blurred = full[tuple(slice(a, a + n) for a, n in zip(start, shape))]
    ratio = g / torch.clamp(blurred, min=eps)
    # correlation c[k] = sum_i ratio[i] s[i + K//2 - k]
    big = tuple(next_fast_len(2 * n + k, real=True) for n, k in zip(shape, k_shape))
    corr = torch.fft.irfftn(torch.conj(torch.fft.rfftn(ratio, big)) * torch.fft.rfftn(s, big), big)
    lags = [torch.arange(k // 2, k // 2 - k, -1) % m for k, m in zip(k_shape, big)]
    update = corr[lags[0][:, None, None], lags[1][None, :, None], lags[2][None, None, :]]
    h = torch.clamp(h * update / torch.clamp(s.sum(), min=eps), min=0.0)
    return h / h.sum()


def rld_blind(stack, psf_shape: Sequence[int], config: RldConfig = RldConfig(), initial_psf=None,
              optical_config: OpticalConfig | None = None):
    """Blind Richardson-Lucy: alternate PSF and object updates, then deconvolve.

    The PSF starts from ``initial_psf``, else the unaberrated model PSF of
    ``optical_config`` cropped to ``psf_shape``, else a flat kernel. After
    ``config.psf_iterations`` alternating updates (PSF renormalized to unit
    sum each time) the object is re-estimated from the data with
    ``config.iterations`` non-blind iterations using the frozen PSF.

    Returns
    -------
    (structure, psf) : tuple of ndarray
    """
    psf_shape = tuple(int(k) for k in psf_shape)
    if any(k % 2 == 0 for k in psf_shape):
        raise ConfigurationError("blind PSF shape must be odd along every axis")
    g = _check_stack(stack)
    if initial_psf is not None:
        h = np.asarray(initial_psf, dtype=np.float64)
    elif optical_config is not None:
        h = _center_crop(psf_3d(optical_config.with_shape(g.shape)), psf_shape)
    else:
        h = np.ones(psf_shape)
    if h.shape != psf_shape:
        raise ConfigurationError("initial PSF does not match psf_shape")
    h = torch.as_tensor(h / h.sum())
    eps = config.epsilon * float(g.max()) if float(g.max()) > 0 else config.epsilon
    s = g.clone()
    for it in range(config.psf_iterations):
        conv = Convolver(h, g.shape)
        s = _rl_iterations(g, conv, s, 1, eps)
        h = _psf_update(g, s, h, eps)
        if not torch.all(torch.isfinite(h)):
            raise NumericalError(f"non-finite PSF at iteration {it}", iteration=it)
    structure = rld_nonblind(g.numpy(), h.numpy(), config)
    return structure, h.numpy()


class PupilRetrieval(NamedTuple):
    pupil: np.ndarray
    mismatch: list
    focal_plane: int
    shift: tuple


def _peak_snr(stack):
    med = np.median(stack)
    mad = 1.4826 * np.median(np.abs(stack - med))
    noise = mad if mad > 0 else np.std(stack)
    if noise == 0:
        return np.inf if stack.max() > med else 0.0
    return float((stack.max() - med) / noise)


def _centered_stack(stack):
    """Roll the bead to the lateral center and its focal plane to ``nz // 2``."""
    nz, ny, nx = stack.shape
    mip = stack.max(axis=0)
    py, px = np.unravel_index(np.argmax(mip), mip.shape)
    sy, sx = ny // 2 - py, nx // 2 - px
    sums = stack.sum(axis=(1, 2))
    sharp = (stack ** 2).sum(axis=(1, 2)) / np.maximum(sums ** 2, 1e-300)
    w = sharp - sharp.min()
    focus = int(round(np.sum(w * np.arange(nz)) / w.sum())) if w.sum() > 0 else nz // 2
    sz = focal_plane_index(nz) - focus
    return np.roll(stack, (sz, sy, sx), axis=(0, 1, 2)), (sz, sy, sx)


def retrieve_pupil(bead_stack, optical_config: OpticalConfig, n_iterations: int = 100,
                   snr_threshold: float = 10.0) -> PupilRetrieval:
    """Multi-plane Gerchberg-Saxton estimate of the complex pupil field.

    Every iteration propagates the pupil estimate to each plane with the
    defocus kernel, imposes the measured amplitude, propagates back, averages
    the plane-wise pupil estimates and re-applies the aperture support.
    """
    stack = np.asarray(bead_stack, dtype=np.float64)
    if stack.ndim != 3:
        raise InputError("bead stack must be 3D")
    if n_iterations < 1:
        raise ConfigurationError("n_iterations must be >= 1")
    if _peak_snr(stack) < snr_threshold:
        raise InputError(f"no bead found: peak SNR below threshold {snr_threshold}")
    stack = np.clip(stack - np.median(stack), 0.0, None)
    stack, shift = _centered_stack(stack)
    config = optical_config.with_shape(stack.shape)
    grid = PupilGrid.from_config(config)
    aperture = grid.aperture
    k2 = (config.refractive_index / config.wavelength) ** 2 - grid.xi ** 2 - grid.eta ** 2
    kz = np.sqrt(np.clip(k2, 0.0, None))
    defocus = np.exp(-2j * np.pi * config.z_positions()[:, None, None] * kz[None])

    def fwd(field):
        return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(field, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))

    def inv(field):
        return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(field, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))

    pupil = aperture.astype(complex)
    energy = aperture.sum()
    sums = stack.sum(axis=(1, 2), keepdims=True)
    amplitude = np.sqrt(stack * energy / np.maximum(sums, 1e-300))
    mismatch = []
    for _ in range(n_iterations + 1):
        image = fwd(pupil[None] * defocus)
        mismatch.append(float(np.sqrt(np.mean((np.abs(image) - amplitude) ** 2))))
        if len(mismatch) > n_iterations:
            break
        constrained = amplitude * np.exp(1j * np.angle(image))
        pupil = (inv(constrained) * np.conj(defocus)).mean(axis=0) * aperture
    return PupilRetrieval(pupil, mismatch, focal_plane_index(stack.shape[0]), shift)


_NUISANCE = (0, 1, 2, 4)  # piston, tilts, defocus: fitted but not reported


def fit_pupil_phase(pupil: np.ndarray, grid: PupilGrid, basis: ZernikeBasis = ZernikeBasis()
                    ) -> WavefrontAberration:
    """Least-squares Zernike fit of the phase of ``pupil`` over the aperture.

    Small phases are fitted directly. When the wrapped phase spans more than
    half a wave peak-to-valley, the fit uses wrapped finite differences along
    x and y instead, which are insensitive to 2 pi jumps as long as the true
    phase changes by less than half a wave between neighbouring samples.
    """
    mask = grid.aperture
    fit_indices = tuple(j for j in _NUISANCE if j not in basis.indices) + basis.indices
    modes = ZernikeBasis.from_indices(fit_indices).evaluate(grid)
    phase = np.angle(pupil)
    waves = phase / (2 * np.pi)
    ptv = np.ptp(waves[mask])
    if ptv <= 0.5:
        design = modes[:, mask].T
        coef, *_ = np.linalg.lstsq(design, waves[mask], rcond=None)
    else:
        rows, rhs = [], []
        for axis in (0, 1):
            nxt = np.roll(pupil, -1, axis=axis)
            both = mask & np.roll(mask, -1, axis=axis)
            if axis == 0:
                both[-1, :] = False
            else:
                both[:, -1] = False
            dphi = np.angle(nxt * np.conj(pupil))[both] / (2 * np.pi)
            dmodes = (np.roll(modes, -1, axis=axis + 1) - modes)[:, both]
            rows.append(dmodes.T)
            rhs.append(dphi)
        coef, *_ = np.linalg.lstsq(np.concatenate(rows), np.concatenate(rhs), rcond=None)
    values = dict(zip(fit_indices, coef))
    return WavefrontAberration({j: float(values[j]) for j in basis.indices})


def gs_phase_retrieval(bead_stack, optical_config: OpticalConfig, n_iterations: int = 100,
                       basis: ZernikeBasis = ZernikeBasis(), snr_threshold: float = 10.0
                       ) -> WavefrontAberration:
    """Retrieve the pupil from a single-bead stack and fit ``basis`` to its phase."""
    result = retrieve_pupil(bead_stack, optical_config, n_iterations, snr_threshold)
    grid = PupilGrid.from_config(optical_config.with_shape(np.shape(bead_stack)))
    return fit_pupil_phase(result.pupil, grid, basis)


def pupil_phase_map(pupil: np.ndarray, grid: PupilGrid) -> np.ndarray:
    """Wrapped pupil phase in waves, zero outside the aperture."""
    return np.where(grid.aperture, np.angle(pupil) / (2 * np.pi), 0.0)
