"""Self-supervised joint estimation of structure and wavefront.

The measured stack ``g`` is explained by ``s * h(alpha)`` where ``s`` is a
neural field sampled on a voxel grid and ``h(alpha)`` the Zernike-parameterized
PSF. Both are fitted by minimizing ``1 - SSIM(s * h, g) + R(s)`` with Adam,
after a pretraining stage that fits the field directly to the stack.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError, TrainingError
from .forward import NoiseModel, compose_correction, convolve_3d, simulate_stack
from .io import ImageStack, write_aberration, write_stack
from .metrics import image_contrast
from .neural import EncodingSpec, NeuralField, grid_coordinates, init_field, save_field
from .optics import (DEFAULT_MODE_INDICES, OpticalConfig, PsfModel, WavefrontAberration,
                     ZernikeBasis)

__all__ = [
    "TrainConfig", "LossBreakdown", "EstimationResult", "ForwardChain", "ssim_3d", "regularizer",
    "loss", "full_gradients", "pretrain", "estimate", "save_result", "CorrectionRecord",
    "iterative_correction", "normalize_stack",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule, regularization and field architecture.

    ``axial_margin`` / ``lateral_margin`` pad the structure grid (in voxels per
    side) beyond the imaged field of view so that out-of-view emitters can
    explain blur entering the stack. ``num_directions`` and ``init_gain`` are
    forwarded to :class:`~cocoa.neural.EncodingSpec` and
    :func:`~cocoa.neural.init_field`. ``restarts > 1`` repeats the joint
    optimization from independently seeded starts and keeps the lowest final loss.
    """

    pretrain_iterations: int = 400
    train_iterations: int = 2000
    lr_pretrain: float = 1e-2
    lr_structure: float = 5e-3
    lr_zernike: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tv_weight: float = 1e-3
    l1_weight: float = 1e-4
    alpha_init: float = 0.05
    modes: tuple[int, ...] = DEFAULT_MODE_INDICES
    seed: int = 0
    widths: tuple[int, ...] = (128,) * 8
    skip_layers: tuple[int, ...] = (4,)
    activation: str = "relu"
    init_gain: float = math.sqrt(6.0)
    num_directions: int = 8
    num_radial: int = 10
    num_axial: int = 6
    axial_margin: int = 2
    lateral_margin: int = 0
    pretrain_loss: str = "mse"
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dtype: str = "float32"
    restarts: int = 1

    def __post_init__(self):
        for name in ("lr_pretrain", "lr_structure", "lr_zernike"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.pretrain_iterations < 0 or self.train_iterations < 1:
            raise ConfigurationError("need pretrain_iterations >= 0 and train_iterations >= 1")
        if self.tv_weight < 0 or self.l1_weight < 0 or self.alpha_init < 0:
            raise ConfigurationError("regularizer weights and alpha_init must be non-negative")
        if self.axial_margin < 0 or self.lateral_margin < 0:
            raise ConfigurationError("margins must be non-negative")
        if self.pretrain_loss not in ("mse", "ssim"):
            raise ConfigurationError("pretrain_loss must be 'mse' or 'ssim'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be 'float32' or 'float64'")
        if 4 in self.modes:
            raise ConfigurationError("defocus (j=4) is absorbed by axial placement and may not be estimated")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigurationError("ssim_window must be odd")
        object.__setattr__(self, "modes", tuple(int(j) for j in self.modes))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "skip_layers", tuple(int(k) for k in self.skip_layers))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


class LossBreakdown:
    """Loss components; ``total = ssim_term + tv_term + l1_term`` with weights already applied."""

    __slots__ = ("ssim_term", "tv_term", "l1_term", "total")

    def __init__(self, ssim_term, tv_term, l1_term):
        self.ssim_term = ssim_term
        self.tv_term = tv_term
        self.l1_term = l1_term
        self.total = ssim_term + tv_term + l1_term

    @property
    def value_distribution_term(self):
        return self.l1_term

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(_scalar(v) for v in (self.ssim_term, self.tv_term, self.l1_term)))

    def row(self) -> tuple[float, float, float, float]:
        return tuple(_scalar(v) for v in (self.total, self.ssim_term, self.tv_term, self.l1_term))

    def __repr__(self):
        t, s, v, l = self.row()
        return f"LossBreakdown(total={t:.6g}, ssim={s:.6g}, tv={v:.6g}, l1={l:.6g})"


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_3d(estimate, reference, data_range: float = 1.0, window: int = 11, sigma: float = 1.5):
    """Mean over z-planes of the 2D SSIM with a Gaussian window (valid region only).

    Returns a tensor when either input is a tensor, else a float. Planes
    smaller than the window use the largest odd window that fits.
    """
    as_float = not (isinstance(estimate, torch.Tensor) or isinstance(reference, torch.Tensor))
    x = torch.as_tensor(estimate)
    y = torch.as_tensor(reference)
    if x.shape != y.shape:
        raise ShapeError(f"SSIM operands differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ShapeError("SSIM expects a (nz, ny, nx) stack")
    dtype = torch.promote_types(x.dtype, y.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    x = x.to(dtype)[:, None]
    y = y.to(dtype)[:, None]
    size = min(window, x.shape[-1], x.shape[-2])
    size -= 1 - size % 2
    w = _gaussian_window(size, sigma, dtype)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    var_x = F.conv2d(x * x, w) - mu_x * mu_x
    var_y = F.conv2d(y * y, w) - mu_y * mu_y
    cov = F.conv2d(x * y, w) - mu_x * mu_y
    smap = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    value = smap.mean(dim=(1, 2, 3)).mean()
    return float(value) if as_float else value


def regularizer(structure) -> tuple[torch.Tensor, torch.Tensor]:
    """``(tv, l1)``: mean over axes of mean absolute forward difference, and mean voxel value.

    Structures are non-negative, so the mean is the l1 norm per voxel. The
    subgradient of ``|.|`` at 0 is 0 (torch convention).
    """
    s = torch.as_tensor(structure)
    diffs = [torch.diff(s, dim=a).abs().mean() for a in range(s.ndim) if s.shape[a] > 1]
    tv = torch.stack(diffs).mean() if diffs else s.new_zeros(())
    return tv, s.abs().mean()


def loss(estimate_stack, measured_stack, structure, config: TrainConfig = TrainConfig()) -> LossBreakdown:
    """``1 - SSIM(estimate, measured) + tv_weight * TV(s) + l1_weight * |s|_1`` (L = 1)."""
    ssim = ssim_3d(torch.as_tensor(estimate_stack), torch.as_tensor(measured_stack), 1.0,
                   config.ssim_window, config.ssim_sigma)
    tv, l1 = regularizer(structure)
    return LossBreakdown(1 - ssim, config.tv_weight * tv, config.l1_weight * l1)


def normalize_stack(stack) -> tuple[np.ndarray, float, float]:
    """Min-max normalize to ``[0, 1]``; returns ``(normalized, low, span)``."""
    g = np.asarray(stack, dtype=np.float64)
    if g.ndim != 3:
        raise ShapeError("measured stack must be 3D")
    if not np.all(np.isfinite(g)):
        raise ConfigurationError("measured stack contains non-finite values")
    low, high = float(g.min()), float(g.max())
    span = high - low
    if span <= 0:
        raise ConfigurationError("measured stack is constant")
    return (g - low) / span, low, span


class ForwardChain:
    """Field on the structure grid -> convolution with ``h(alpha)`` -> image grid.

    ``flux_scale`` multiplies the field output; :func:`estimate` sets it so the
    rendered stack from a pretrained field matches the measured flux.
    """

    def __init__(self, image_shape: Sequence[int], optical_config: OpticalConfig,
                 config: TrainConfig = TrainConfig()):
        self.image_shape = tuple(int(n) for n in image_shape)
        self.config = config
        self.dtype = config.torch_dtype
        margin = (config.axial_margin, config.lateral_margin, config.lateral_margin)
        self.margin = margin
        self.structure_shape = tuple(n + 2 * m for n, m in zip(self.image_shape, margin))
        psf_config = optical_config.with_shape(self.image_shape)
        self.psf_model = PsfModel(psf_config, ZernikeBasis.from_indices(config.modes), self.dtype)
        self.coords = grid_coordinates(self.structure_shape, self.dtype)
        self.encoding = EncodingSpec.for_grid(self.structure_shape, num_radial=config.num_radial,
                                              num_axial=config.num_axial,
                                              num_directions=config.num_directions)
        self.flux_scale = 1.0

    def new_field(self) -> NeuralField:
        c = self.config
        return init_field(self.encoding, c.widths, c.seed, c.skip_layers, c.activation,
                          dtype=self.dtype, init_gain=c.init_gain)

    def structure(self, field: NeuralField) -> torch.Tensor:
        return self.flux_scale * field(self.coords).reshape(self.structure_shape)

    def render(self, structure: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
        return convolve_3d(structure, self.psf_model(alpha), self.image_shape)

    def crop(self, structure):
        index = tuple(slice(m, m + n) for m, n in zip(self.margin, self.image_shape))
        return structure[index]

    def pad(self, stack: np.ndarray) -> np.ndarray:
        return np.pad(stack, [(m, m) for m in self.margin])

    def evaluate(self, field: NeuralField, alpha: torch.Tensor, measured: torch.Tensor) -> LossBreakdown:
        s = self.structure(field)
        return loss(self.render(s, alpha), measured, s, self.config)


def full_gradients(field: NeuralField, alpha, measured_stack, optical_config: OpticalConfig,
                   config: TrainConfig = TrainConfig(), chain: ForwardChain | None = None
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Reverse-mode ``(dL/dtheta, dL/dalpha)`` through field, PSF, convolution and SSIM.

    ``measured_stack`` must already be normalized to ``[0, 1]``. The flat
    ``theta`` ordering matches :meth:`NeuralField.flat_parameters`.
    """
    chain = chain or ForwardChain(np.shape(measured_stack), optical_config, config)
    g = torch.as_tensor(np.asarray(measured_stack), dtype=chain.dtype)
    a = torch.as_tensor(alpha, dtype=chain.dtype).detach().clone().requires_grad_(True)
    params = list(field.parameters())
    with torch.enable_grad():
        total = chain.evaluate(field, a, g).total
        grads = torch.autograd.grad(total, params + [a], allow_unused=True)
    flat = [(gr if gr is not None else torch.zeros_like(p)).reshape(-1) for gr, p in zip(grads, params)]
    return torch.cat(flat).detach(), grads[-1].detach()


def _check_finite(value: torch.Tensor, trace, iteration: int, stage: str):
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss during {stage} at iteration {iteration}", trace=trace)


def pretrain(measured_stack, field: NeuralField, config: TrainConfig = TrainConfig(),
             coords: torch.Tensor | None = None, trace: list | None = None) -> NeuralField:
    """Fit ``field`` on the voxel grid of ``measured_stack`` (values in ``[0, 1]``), in place.

    The output bias is first reset so the field starts at the stack mean.
    ``coords`` defaults to the grid of the stack itself; per-iteration fit
    losses are appended to ``trace`` when given.
    """
    if config.pretrain_iterations == 0:
        return field
    dtype = field.layers[0].weight.dtype
    target = torch.as_tensor(np.asarray(measured_stack), dtype=dtype)
    coords = grid_coordinates(target.shape, dtype) if coords is None else coords
    trace = [] if trace is None else trace
    with torch.no_grad():
        # start the output at the stack mean; a saturated softplus otherwise collapses the fit to zero
        mean = max(float(target.mean()), 1e-6)
        field.layers[-1].bias.fill_(mean + math.log(-math.expm1(-mean)))
    opt = torch.optim.Adam(field.parameters(), lr=config.lr_pretrain, betas=config.betas, eps=config.adam_eps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.pretrain_iterations)
    for it in range(config.pretrain_iterations):
        opt.zero_grad()
        out = field(coords).reshape(target.shape)
        if config.pretrain_loss == "mse":
            value = torch.mean((out - target) ** 2)
        else:
            value = 1 - ssim_3d(out, target, 1.0, config.ssim_window, config.ssim_sigma)
        trace.append(float(value.detach()))
        _check_finite(value, trace, it, "pretraining")
        value.backward()
        opt.step()
        sched.step()
    return field


@dataclass
class EstimationResult:
    """Estimated wavefront and structure.

    ``structure`` covers the imaged field of view in units of the input
    stack (its min-max normalization undone); ``full_structure`` includes the
    grid margin in normalized units.
    """

    aberration: WavefrontAberration
    structure: np.ndarray
    field: NeuralField
    trace: list[LossBreakdown]
    pretrain_trace: list[float] = dc_field(default_factory=list)
    full_structure: np.ndarray | None = None
    rendered: np.ndarray | None = None
    flux_scale: float = 1.0

    @property
    def initial_loss(self) -> float:
        return float(self.trace[0].total)

    @property
    def final_loss(self) -> float:
        return float(self.trace[-1].total)


def restart_seed(seed: int, restart: int) -> int:
    """Seed of restart ``restart``; restart 0 keeps ``seed`` itself."""
    if restart == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), restart]).generate_state(1)[0])


def estimate(measured_stack, optical_config: OpticalConfig, config: TrainConfig = TrainConfig(),
             callback: Callable[[int, LossBreakdown, np.ndarray], None] | None = None) -> EstimationResult:
    """Pretrain the field on the stack, then jointly optimize field weights and Zernike coefficients."""
    torch.set_flush_denormal(True)
    g_np, low, span = normalize_stack(measured_stack)
    if min(g_np.shape[1:]) < 3:
        raise ConfigurationError("stack is too small for the PSF support")
    best = None
    for k in range(config.restarts):
        run_config = dataclasses.replace(config, seed=restart_seed(config.seed, k))
        result = _estimate_once(g_np, low, span, optical_config, run_config, callback)
        # strict comparison keeps the earliest start on ties
        if best is None or result.final_loss < best.final_loss:
            best = result
    return best


def _estimate_once(g_np, low, span, optical_config, config, callback) -> EstimationResult:
    chain = ForwardChain(g_np.shape, optical_config, config)
    g = torch.as_tensor(g_np, dtype=chain.dtype)
    field = chain.new_field()
    gen = torch.Generator().manual_seed(int(config.seed))

    pre_trace: list[float] = []
    pretrain(chain.pad(g_np), field, config, chain.coords, pre_trace)

    alpha0 = (torch.rand(len(config.modes), generator=gen, dtype=torch.float64) * 2 - 1) * config.alpha_init
    alpha = alpha0.to(chain.dtype).requires_grad_(True)
    with torch.no_grad():
        s0 = chain.structure(field)
        rendered = chain.render(s0, alpha)
        denom = float(rendered.sum())
        # brightness of the pretrained fit is matched to the measured flux through h(alpha0)
        chain.flux_scale = float(g.sum()) / denom if denom > 0 else 1.0

    opt = torch.optim.Adam([
        {"params": list(field.parameters()), "lr": config.lr_structure},
        {"params": [alpha], "lr": config.lr_zernike},
    ], betas=config.betas, eps=config.adam_eps)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.train_iterations)
    trace: list[LossBreakdown] = []
    for it in range(config.train_iterations):
        opt.zero_grad()
        parts = chain.evaluate(field, alpha, g)
        trace.append(parts.as_floats())
        _check_finite(parts.total, trace, it, "training")
        parts.total.backward()
        opt.step()
        sched.step()
        if callback is not None:
            callback(it, trace[-1], alpha.detach().double().numpy().copy())
    with torch.no_grad():
        final = chain.evaluate(field, alpha, g)
        trace.append(final.as_floats())
        s = chain.structure(field)
        rendered = chain.render(s, alpha).double().numpy()
        s_np = s.double().numpy()
    structure = np.clip(chain.crop(s_np) * span, 0, None)
    aberration = WavefrontAberration.from_vector(config.modes, alpha.detach().double().numpy())
    return EstimationResult(aberration, structure, field, trace, pre_trace, s_np, rendered * span + low,
                            chain.flux_scale)


def save_result(result: EstimationResult, out_dir, pitch=(1.0, 1.0, 1.0), metadata: dict | None = None) -> dict:
    """Write ``aberration.json``, ``structure.tif`` (+ sidecar), ``loss.csv`` and ``field.bin``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "aberration": write_aberration(out / "aberration.json", result.aberration),
        "structure": write_stack(out / "structure.tif",
                                 ImageStack(result.structure, tuple(pitch), dict(metadata or {}))),
        "loss": out / "loss.csv",
        "field": out / "field.bin",
    }
    with open(paths["loss"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "ssim_term", "tv_term", "l1_term"])
        for i, parts in enumerate(result.trace):
            writer.writerow([i] + [repr(v) for v in parts.row()])
    save_field(result.field, paths["field"])
    return paths


@dataclass(frozen=True)
class CorrectionRecord:
    round: int
    corrective: WavefrontAberration
    residual: WavefrontAberration
    residual_rms: float
    contrast: float
    estimate: WavefrontAberration


def iterative_correction(sample_aberration: WavefrontAberration, phantom, optical_config: OpticalConfig,
                         config: TrainConfig = TrainConfig(), rounds: int = 3,
                         illumination: float = 100.0, background: float = 10.0,
                         noise: NoiseModel | None = NoiseModel(),
                         callback: Callable[[CorrectionRecord], None] | None = None) -> list[CorrectionRecord]:
    """Simulated correction loop standing in for a deformable mirror.

    Each round images ``phantom`` through the current residual, estimates the
    aberration, adds ``-estimate`` to the accumulated correction and records
    the new residual. Contrast is measured on the max projection of the
    stack imaged through that new residual. Noise seeds advance per round.
    """
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    modes = sorted(set(config.modes) | set(sample_aberration.coefficients))
    residual = WavefrontAberration({j: sample_aberration[j] for j in modes})
    correction = WavefrontAberration({j: 0.0 for j in modes})
    records = []
    for r in range(rounds):
        round_noise = None if noise is None else NoiseModel(noise.gain, noise.readout, noise.seed + r)
        _, stack = simulate_stack(phantom, optical_config, residual, illumination, background, round_noise)
        result = estimate(stack, optical_config, config)
        step = -result.aberration
        correction = correction + step
        residual = compose_correction(sample_aberration, correction)
        _, after = simulate_stack(phantom, optical_config, residual, illumination, background, None)
        record = CorrectionRecord(r + 1, correction, residual, residual.rms(), image_contrast(after.max(axis=0)),
                                  result.aberration)
        records.append(record)
        if callback is not None:
            callback(record)
    return records
