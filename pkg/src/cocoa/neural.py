"""Coordinate-based neural field with a radial Fourier feature encoding.

Coordinates are normalized to ``[-1, 1]`` per axis (x and y share one scale
so that the lateral radius is isotropic). The encoding maps ``(x, y, z)`` to
sines and cosines of the lateral radius and of depth at a ladder of
frequencies, optionally followed by the raw coordinates. With
``num_directions > 0`` the lateral part additionally encodes projections of
``(x, y)`` onto equally spaced in-plane directions, which the radius alone
cannot resolve; see :class:`EncodingSpec`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DomainError


@dataclass(frozen=True)
class EncodingSpec:
    """Fourier feature ladder for the lateral radius and the depth coordinate.

    Frequencies are in cycles per normalized unit and run from ``base`` to
    ``radial_max`` / ``axial_max`` with linear or geometric spacing.
    ``num_directions`` adds ``{sin, cos}(2 pi f (x cos t + y sin t))`` for
    ``t = k pi / num_directions``; it is 0 for the pure radial encoding.
    """

    num_radial: int = 10
    num_axial: int = 6
    base: float = 1.0
    radial_max: float = 8.0
    axial_max: float = 4.0
    spacing: str = "geometric"
    include_raw: bool = True
    num_directions: int = 0

    def __post_init__(self):
        if self.num_radial < 1 or self.num_axial < 1:
            raise ConfigurationError("encoding needs at least one radial and one axial frequency")
        if self.spacing not in ("linear", "geometric"):
            raise ConfigurationError(f"unknown spacing {self.spacing!r}")
        if self.base <= 0 or self.num_directions < 0:
            raise ConfigurationError("invalid encoding parameters")
        for f in (self.radial_frequencies, self.axial_frequencies):
            if len(f) > 1 and not np.all(np.diff(f) > 0):
                raise ConfigurationError("encoding frequencies must be strictly increasing")

    @classmethod
    def for_grid(cls, shape: Sequence[int], **kwargs) -> "EncodingSpec":
        """Ladder up to half the grid Nyquist frequency (N/8 cycles per unit)."""
        nz, ny, nx = shape
        kwargs.setdefault("radial_max", max(max(nx, ny) / 8, 1.0 + 1e-6 * kwargs.get("num_radial", 10)))
        kwargs.setdefault("axial_max", max(nz / 8, 1.0 + 1e-6 * kwargs.get("num_axial", 6)))
        return cls(**kwargs)

    def _ladder(self, count, top):
        if count == 1:
            return np.array([self.base])
        if self.spacing == "geometric":
            return np.geomspace(self.base, top, count)
        return np.linspace(self.base, top, count)

    @property
    def radial_frequencies(self) -> np.ndarray:
        return self._ladder(self.num_radial, self.radial_max)

    @property
    def axial_frequencies(self) -> np.ndarray:
        return self._ladder(self.num_axial, self.axial_max)

    @property
    def size(self) -> int:
        lateral = self.num_radial * (1 + self.num_directions)
        return 2 * lateral + 2 * self.num_axial + (3 if self.include_raw else 0)


def encode(coords, spec: EncodingSpec) -> torch.Tensor:
    """Encode ``(..., 3)`` coordinates ordered ``(x, y, z)`` into ``(..., spec.size)`` features."""
    coords = torch.as_tensor(coords)
    if not coords.is_floating_point():
        coords = coords.to(torch.float64)
    if coords.shape[-1] != 3:
        raise DomainError("coordinates must have 3 components (x, y, z)")
    if torch.any(coords.abs() > 1 + 1e-9):
        raise DomainError("coordinates must be normalized to [-1, 1]")
    x, y, z = coords.unbind(-1)
    rho = torch.sqrt(x * x + y * y)
    fr = torch.as_tensor(spec.radial_frequencies, dtype=coords.dtype)
    fz = torch.as_tensor(spec.axial_frequencies, dtype=coords.dtype)
    arg_r = 2 * np.pi * rho[..., None] * fr
    arg_z = 2 * np.pi * z[..., None] * fz
    parts = [torch.sin(arg_r), torch.cos(arg_r)]
    for k in range(spec.num_directions):
        t = np.pi * k / spec.num_directions
        arg = 2 * np.pi * (x * np.cos(t) + y * np.sin(t))[..., None] * fr
        parts += [torch.sin(arg), torch.cos(arg)]
    parts += [torch.sin(arg_z), torch.cos(arg_z)]
    if spec.include_raw:
        parts.append(coords)
    return torch.cat(parts, dim=-1)


def grid_coordinates(shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """Voxel-center coordinates ``(nz*ny*nx, 3)`` in ``(x, y, z)`` order.

    Depth is normalized to ``(-1, 1)`` on its own; x and y share the scale of
    the larger lateral axis.
    """
    nz, ny, nx = shape
    lateral = max(nx, ny)
    x = (torch.arange(nx, dtype=torch.float64) + 0.5 - nx / 2) / (lateral / 2)
    y = (torch.arange(ny, dtype=torch.float64) + 0.5 - ny / 2) / (lateral / 2)
    z = (torch.arange(nz, dtype=torch.float64) + 0.5 - nz / 2) / (nz / 2)
    zz, yy, xx = torch.meshgrid(z, y, x, indexing="ij")
    return torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3).to(dtype)


_ACTIVATIONS = {"relu": nn.ReLU, "leaky_relu": nn.LeakyReLU, "silu": nn.SiLU, "softplus": nn.Softplus, "tanh": nn.Tanh}


class NeuralField(nn.Module):
    """Perceptron over encoded coordinates with re-injection of the encoding.

    Parameters
    ----------
    encoding : EncodingSpec
    widths : sequence of int
        Output widths of the hidden layers; a final layer maps to one value,
        so ``len(widths) + 1`` linear layers in total (9 by default).
    skip_layers : sequence of int
        Zero-based indices of layers whose input is the previous activation
        concatenated with the encoded coordinates.
    activation, output : str
        Hidden nonlinearity and the output map; the output map must be
        non-negative (``softplus`` or ``relu``).
    """

    def __init__(self, encoding: EncodingSpec, widths: Sequence[int] = (128,) * 8,
                 skip_layers: Sequence[int] = (4,), activation: str = "relu", output: str = "softplus"):
        super().__init__()
        if output not in ("softplus", "relu"):
            raise ConfigurationError("output map must be non-negative: 'softplus' or 'relu'")
        if activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.encoding = encoding
        self.widths = tuple(int(w) for w in widths)
        self.skip_layers = tuple(sorted(int(k) for k in skip_layers))
        if any(k <= 0 or k > len(self.widths) for k in self.skip_layers):
            raise ConfigurationError("skip layers must address a layer after the first")
        self.activation_name = activation
        self.output_name = output
        layers = []
        fan_in = encoding.size
        for i, width in enumerate(self.widths + (1,)):
            if i in self.skip_layers:
                fan_in += encoding.size
            layers.append(nn.Linear(fan_in, width))
            fan_in = width
        self.layers = nn.ModuleList(layers)
        self.act = _ACTIVATIONS[activation]()
        self.out = nn.Softplus() if output == "softplus" else nn.ReLU()

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [(l.in_features, l.out_features) for l in self.layers]

    def num_parameters(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_shapes)

    def forward_encoded(self, features: torch.Tensor) -> torch.Tensor:
        h = features
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if i in self.skip_layers:
                h = torch.cat([h, features], dim=-1)
            h = layer(h)
            h = self.out(h) if i == last else self.act(h)
        return h[..., 0]

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        param = self.layers[0].weight
        return self.forward_encoded(encode(coords.to(param.dtype), self.encoding))

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach()

    def load_flat_parameters(self, theta) -> None:
        theta = torch.as_tensor(theta, dtype=self.layers[0].weight.dtype)
        if theta.numel() != self.num_parameters():
            raise ConfigurationError(f"expected {self.num_parameters()} parameters, got {theta.numel()}")
        nn.utils.vector_to_parameters(theta, self.parameters())

    def config_dict(self) -> dict:
        return {
            "encoding": asdict(self.encoding),
            "widths": list(self.widths),
            "skip_layers": list(self.skip_layers),
            "activation": self.activation_name,
            "output": self.output_name,
        }


def init_field(encoding: EncodingSpec, widths: Sequence[int] = (128,) * 8, seed: int = 0,
               skip_layers: Sequence[int] = (4,), activation: str = "relu", output: str = "softplus",
               dtype=torch.float32, init_gain: float = 1.0) -> NeuralField:
    """Build a field with weights and biases uniform in ``+-init_gain/sqrt(fan_in)``, seeded."""
    field = NeuralField(encoding, widths, skip_layers, activation, output).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for layer in field.layers:
            bound = init_gain / np.sqrt(layer.in_features)
            for p in (layer.weight, layer.bias):
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))
    field.seed = int(seed)
    return field


def field_forward(field: NeuralField, coords) -> torch.Tensor:
    return field(torch.as_tensor(coords))


def field_gradients(field: NeuralField, coords, upstream) -> torch.Tensor:
    """Vector-Jacobian product: gradient of ``sum(upstream * field(coords))`` w.r.t. the flat weights."""
    params = list(field.parameters())
    with torch.enable_grad():
        out = field(torch.as_tensor(coords))
        upstream = torch.as_tensor(upstream, dtype=out.dtype)
        grads = torch.autograd.grad(out, params, grad_outputs=upstream, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])


_MAGIC = b"NFLD"


def save_field(field: NeuralField, path) -> None:
    """Write weights as float32 little-endian after a length-prefixed JSON header."""
    header = field.config_dict()
    header["seed"] = getattr(field, "seed", None)
    header["num_parameters"] = field.num_parameters()
    blob = json.dumps(header, sort_keys=True).encode()
    theta = field.flat_parameters().to(torch.float32).numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob + theta.tobytes())


def load_field(path, dtype=torch.float32) -> NeuralField:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ConfigurationError(f"{path} is not a neural field file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    theta = np.frombuffer(data[8 + n:], dtype="<f4")
    field = NeuralField(EncodingSpec(**header["encoding"]), header["widths"], header["skip_layers"],
                        header["activation"], header["output"]).to(dtype)
    field.load_flat_parameters(torch.from_numpy(theta.astype(np.float64)))
    field.seed = header.get("seed")
    return field
