"""Image-quality and reconstruction metrics.

Covers camera gain estimation, shot/read-noise SNR, the filtered
Gaussian-mixture signal-to-background ratio, Pearson correlation, sliced
Wasserstein distance between intensity-weighted voxel clouds, percentile
contrast, radially averaged power spectra, wavefront error and the
two-segment piecewise-linear cutoff fit used for performance sweeps.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import InputError, UndefinedMetricError
from .optics import WavefrontAberration


def camera_gain(frames) -> float:
    """Gain (pixel value per photon) from frames at constant illumination.

    ``frames`` has time on axis 0. The per-pixel ratio of temporal variance
    to mean is median-averaged over pixels with non-zero mean and variance.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[0] < 2:
        raise InputError("need at least two frames")
    mean = frames.mean(axis=0)
    var = frames.var(axis=0, ddof=1)
    usable = (mean > 0) & (var > 0)
    if not usable.any():
        raise InputError("no pixel with positive mean and variance; cannot estimate gain")
    return float(np.median(var[usable] / mean[usable]))


def snr_from_mean(mean_signal: float, gain: float, readout: float) -> float:
    if gain <= 0:
        raise InputError("gain must be positive")
    photons = max(mean_signal, 0.0) / gain
    denom = np.sqrt(photons + (readout / gain) ** 2)
    return float(photons / denom) if denom > 0 else 0.0


def snr(stack, signal_mask, gain: float, readout: float) -> float:
    """Shot- and read-noise limited SNR of the mean signal voxel."""
    stack = np.asarray(stack, dtype=np.float64)
    mask = np.asarray(signal_mask, dtype=bool)
    if not mask.any():
        raise InputError("signal mask is empty")
    return snr_from_mean(float(stack[mask].mean()), gain, readout)


@dataclass(frozen=True)
class SbrConfig:
    """Filter widths (voxels) and EM settings for :func:`sbr`.

    ``tied_variance`` shares one variance between the two mixture
    components, which puts the posterior boundary midway between the means.
    Separate variances let a nearly noise-free background component collapse
    and hand the low-pass halo around every feature to the signal class.
    """

    lowpass_sigma: float = 1.0
    highpass_sigma: float = 10.0
    max_iterations: int = 200
    tolerance: float = 1e-6
    tied_variance: bool = True

    def __post_init__(self):
        if not self.highpass_sigma > self.lowpass_sigma:
            raise InputError("high-pass sigma must exceed low-pass sigma")
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise InputError("invalid EM settings")


class SbrResult(NamedTuple):
    sbr: float
    signal_mask: np.ndarray
    background_mask: np.ndarray


def _gmm_two_components(values, max_iterations, tolerance, tied=True):
    """1D two-component EM with means initialized at the 10th/90th percentiles.

    With ``tied`` both components share one variance.
    """
    lo, hi = np.percentile(values, [10, 90])
    if not hi > lo:
        raise UndefinedMetricError("stack has a single intensity mode; SBR undefined")
    means = np.array([lo, hi])
    spread = np.var(values)
    variances = np.array([spread, spread]) / 4
    weights = np.array([0.5, 0.5])
    floor = 1e-12 * spread
    prev = -np.inf
    for _ in range(max_iterations):
        log_p = (np.log(weights) - 0.5 * np.log(2 * np.pi * variances)
                 - 0.5 * (values[:, None] - means) ** 2 / variances)
        top = log_p.max(axis=1, keepdims=True)
        log_norm = top + np.log(np.exp(log_p - top).sum(axis=1, keepdims=True))
        resp = np.exp(log_p - log_norm)
        ll = float(log_norm.mean())
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / len(values)
        means = (resp * values[:, None]).sum(axis=0) / nk
        variances = (resp * (values[:, None] - means) ** 2).sum(axis=0) / nk
        if tied:
            variances = np.full(2, np.dot(weights, variances))
        variances = np.maximum(variances, floor)
        if abs(ll - prev) < tolerance * max(1.0, abs(ll)):
            break
        prev = ll
    else:
        warnings.warn("Gaussian mixture EM did not converge; using last iterate", RuntimeWarning, stacklevel=3)
    return resp, means


def sbr(stack, config: SbrConfig = SbrConfig()) -> SbrResult:
    """Signal-to-background ratio with voxel classification.

    The stack is denoised with a 3D Gaussian, its slowly varying background
    removed by subtracting a broader Gaussian blur, and the filtered voxel
    values are split by a two-component Gaussian mixture. The ratio uses the
    means of the *unfiltered* stack over the two classes.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if not np.all(np.isfinite(stack)):
        raise InputError("stack contains non-finite values")
    low = ndimage.gaussian_filter(stack, config.lowpass_sigma, mode="nearest")
    filtered = low - ndimage.gaussian_filter(stack, config.highpass_sigma, mode="nearest")
    values = filtered.ravel()
    if np.ptp(values) <= 1e-12 * max(np.abs(stack).max(), 1.0):
        raise UndefinedMetricError("stack has a single intensity mode; SBR undefined")
    resp, means = _gmm_two_components(values, config.max_iterations, config.tolerance, config.tied_variance)
    signal_component = int(np.argmax(means))
    signal = (resp[:, signal_component] > 0.5).reshape(stack.shape)
    background = ~signal
    if not signal.any() or not background.any():
        raise UndefinedMetricError("mixture collapsed to one class; SBR undefined")
    bg_mean = stack[background].mean()
    if bg_mean <= 0:
        raise UndefinedMetricError("background mean is not positive; SBR undefined")
    return SbrResult(float(stack[signal].mean() / bg_mean), signal, background)


def pcc(a, b) -> float:
    """Pearson correlation coefficient between two equally shaped arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputError("pcc operands must have equal shapes")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.dot(da, da) * np.dot(db, db))
    if denom == 0:
        raise UndefinedMetricError("pcc undefined for zero-variance input")
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def _weighted_cloud(volume, pitch):
    volume = np.asarray(volume, dtype=np.float64)
    weights = np.clip(volume, 0, None)
    total = weights.sum()
    if not total > 0:
        raise InputError("volume has no positive mass")
    idx = np.nonzero(weights)
    points = np.stack([(i + 0.5) * p for i, p in zip(idx, pitch)], axis=1)
    return points, weights[idx] / total


def _wasserstein_1d(u, u_w, v, v_w, p):
    """p-Wasserstein distance (to the power p) between weighted 1D samples."""
    iu, iv = np.argsort(u), np.argsort(v)
    u, u_w, v, v_w = u[iu], u_w[iu], v[iv], v_w[iv]
    cu, cv = np.cumsum(u_w), np.cumsum(v_w)
    cu[-1] = cv[-1] = 1.0
    levels = np.unique(np.concatenate([cu, cv]))
    dt = np.diff(np.concatenate([[0.0], levels]))
    # quantile functions evaluated on each constant piece
    qu = u[np.minimum(np.searchsorted(cu, levels - 0.5 * dt), len(u) - 1)]
    qv = v[np.minimum(np.searchsorted(cv, levels - 0.5 * dt), len(v) - 1)]
    return float(np.sum(dt * np.abs(qu - qv) ** p))


def emd_sliced(a, b, projections: int = 200, p: int = 2, seed: int = 0,
               pitch: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Monte Carlo sliced p-Wasserstein distance between two volumes.

    Each volume becomes a cloud of voxel centers (``pitch`` units, axis order
    z, y, x) weighted by intensity normalized to unit mass. The result is
    ``(mean_k W_p(proj_k a, proj_k b)^p)^(1/p)`` over ``projections`` random
    directions drawn uniformly on the sphere.
    """
    pa, wa = _weighted_cloud(a, pitch)
    pb, wb = _weighted_cloud(b, pitch)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((projections, pa.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for d in dirs:
        total += _wasserstein_1d(pa @ d, wa, pb @ d, wb, p)
    return float((total / projections) ** (1.0 / p))


def image_contrast(image, low: float = 1.0, high: float = 99.0) -> float:
    """Ratio of the 99th to the 1st percentile (linear interpolation)."""
    image = np.asarray(image, dtype=np.float64)
    p_lo, p_hi = np.percentile(image, [low, high])
    if p_lo <= 0:
        raise InputError("1st percentile is not positive; add a background offset before measuring contrast")
    return float(p_hi / p_lo)


class RadialPSD(NamedTuple):
    frequency: np.ndarray
    power: np.ndarray
    counts: np.ndarray


def radial_psd(image, pitch: float = 1.0) -> RadialPSD:
    """Radially averaged power spectrum of a 2D image.

    Uses an orthonormal FFT so that ``sum(power * counts)`` equals the image
    energy. Bins are one frequency sample wide, frequency in cycles per
    ``pitch`` unit.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InputError("radial_psd expects a 2D image")
    ny, nx = image.shape
    spec = np.abs(np.fft.fftshift(np.fft.fft2(image, norm="ortho"))) ** 2
    ky = (np.arange(ny) - ny // 2) / ny
    kx = (np.arange(nx) - nx // 2) / nx
    n = max(nx, ny)
    radius = np.hypot(*np.meshgrid(ky, kx, indexing="ij")) * n
    bins = np.rint(radius).astype(int).ravel()
    counts = np.bincount(bins)
    sums = np.bincount(bins, weights=spec.ravel())
    keep = counts > 0
    freq = np.arange(len(counts)) / (n * pitch)
    return RadialPSD(freq[keep], sums[keep] / counts[keep], counts[keep])


def wavefront_rms_error(estimate: WavefrontAberration, truth: WavefrontAberration) -> float:
    return (estimate - truth).rms()


@dataclass(frozen=True)
class CutoffFit:
    """Continuous two-segment fit ``y = intercepts[k] + slopes[k] * x``."""

    breakpoint: float
    slopes: tuple[float, float]
    intercepts: tuple[float, float]
    sse: float

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x <= self.breakpoint,
                        self.intercepts[0] + self.slopes[0] * x,
                        self.intercepts[1] + self.slopes[1] * x)


def piecewise_cutoff(xs, ys, resolution: float = 0.01) -> CutoffFit:
    """Least-squares continuous two-segment line, breakpoint by grid search.

    Candidate breakpoints run from the second to the second-to-last x value
    in steps of ``resolution`` times the x range; ties go to the smaller
    breakpoint.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) < 4 or len(xs) != len(ys):
        raise InputError("piecewise fit needs at least 4 (x, y) points")
    if not np.all(np.diff(xs) > 0):
        raise InputError("xs must be strictly increasing")
    step = resolution * (xs[-1] - xs[0])
    candidates = np.arange(xs[1], xs[-2] + 0.5 * step, step)
    best = None
    scale = max(float(np.sum((ys - ys.mean()) ** 2)), 1e-300)
    for c in candidates:
        design = np.stack([np.ones_like(xs), xs, np.maximum(xs - c, 0.0)], axis=1)
        coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
        sse = float(np.sum((design @ coef - ys) ** 2))
        if best is None or sse < best[0] - 1e-12 * scale:
            best = (sse, c, coef)
    sse, c, (a, b1, b2) = best
    return CutoffFit(float(c), (float(b1), float(b1 + b2)), (float(a), float(a - b2 * c)), sse)


@dataclass
class MetricsReport:
    snr: float | None = None
    sbr: float | None = None
    pcc: float | None = None
    emd: float | None = None
    contrast: float | None = None
    rms_wavefront_error: float | None = None
    radial_psd: dict | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.snr is not None and self.snr < 0:
            raise ValueError("snr must be non-negative")
        if self.pcc is not None and not -1 <= self.pcc <= 1:
            raise ValueError("pcc outside [-1, 1]")
        if self.emd is not None and self.emd < 0:
            raise ValueError("emd must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)
