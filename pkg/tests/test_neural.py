import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cocoa.errors import ConfigurationError, DomainError
from cocoa.neural import (EncodingSpec, NeuralField, encode, field_forward, field_gradients, grid_coordinates,
                          init_field, load_field, save_field)


def test_encoding_size_and_order():
    spec = EncodingSpec(num_radial=3, num_axial=2, radial_max=4, axial_max=2)
    coords = torch.tensor([[0.3, 0.4, -0.5]], dtype=torch.float64)
    feats = encode(coords, spec)
    assert feats.shape == (1, spec.size) == (1, 2 * 3 + 2 * 2 + 3)
    fr = spec.radial_frequencies
    np.testing.assert_allclose(feats[0, :3].numpy(), np.sin(2 * np.pi * 0.5 * fr))
    np.testing.assert_allclose(feats[0, 3:6].numpy(), np.cos(2 * np.pi * 0.5 * fr))
    np.testing.assert_allclose(feats[0, -3:].numpy(), [0.3, 0.4, -0.5])


def test_radial_encoding_depends_on_radius_only():
    spec = EncodingSpec(include_raw=False)
    a = torch.tensor([[0.6, 0.0, 0.1]], dtype=torch.float64)
    b = torch.tensor([[0.0, -0.6, 0.1]], dtype=torch.float64)
    torch.testing.assert_close(encode(a, spec), encode(b, spec))


def test_directional_features_separate_mirrored_points():
    spec = EncodingSpec(num_directions=4, include_raw=False)
    a = torch.tensor([[0.6, 0.0, 0.1]], dtype=torch.float64)
    b = torch.tensor([[0.0, -0.6, 0.1]], dtype=torch.float64)
    assert spec.size == 2 * 10 * 5 + 2 * 6
    assert not torch.allclose(encode(a, spec), encode(b, spec))


def test_frequency_ladders():
    geo = EncodingSpec(num_radial=4, base=1, radial_max=8)
    np.testing.assert_allclose(geo.radial_frequencies, [1, 2, 4, 8])
    lin = EncodingSpec(num_axial=3, base=1, axial_max=3, spacing="linear")
    np.testing.assert_allclose(lin.axial_frequencies, [1, 2, 3])
    assert EncodingSpec.for_grid((32, 64, 64)).radial_max == 8


def test_encoding_validation():
    with pytest.raises(ConfigurationError):
        EncodingSpec(num_radial=0)
    with pytest.raises(ConfigurationError):
        EncodingSpec(spacing="log")
    with pytest.raises(ConfigurationError):
        EncodingSpec(num_radial=3, radial_max=0.5)
    with pytest.raises(DomainError):
        encode(torch.tensor([[1.5, 0.0, 0.0]]), EncodingSpec())
    with pytest.raises(DomainError):
        encode(torch.zeros(2, 2), EncodingSpec())


def test_grid_coordinates_layout():
    c = grid_coordinates((4, 6, 8), torch.float64)
    assert c.shape == (4 * 6 * 8, 3)
    grid = c.reshape(4, 6, 8, 3)
    assert torch.all(grid[..., 0].diff(dim=2) > 0)
    assert torch.all(grid[..., 1].diff(dim=1) > 0)
    assert torch.all(grid[..., 2].diff(dim=0) > 0)
    assert c.abs().max() < 1
    # x and y share one scale
    assert float(grid[0, 0, 1, 0] - grid[0, 0, 0, 0]) == pytest.approx(float(grid[0, 1, 0, 1] - grid[0, 0, 0, 1]))


def test_default_architecture():
    field = init_field(EncodingSpec())
    shapes = field.layer_shapes
    assert len(shapes) == 9
    assert shapes[0] == (EncodingSpec().size, 128)
    assert shapes[4] == (128 + EncodingSpec().size, 128)
    assert shapes[-1] == (128, 1)
    assert field.num_parameters() == sum(p.numel() for p in field.parameters())


def test_init_is_seeded_and_bounded():
    a = init_field(EncodingSpec(), widths=(16, 16), seed=5, skip_layers=())
    b = init_field(EncodingSpec(), widths=(16, 16), seed=5, skip_layers=())
    c = init_field(EncodingSpec(), widths=(16, 16), seed=6, skip_layers=())
    torch.testing.assert_close(a.flat_parameters(), b.flat_parameters())
    assert not torch.equal(a.flat_parameters(), c.flat_parameters())
    for layer in a.layers:
        assert layer.weight.abs().max() <= 1 / np.sqrt(layer.in_features)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(*(st.floats(-1, 1, allow_subnormal=False),) * 3), min_size=1, max_size=20))
def test_output_non_negative(points):
    field = init_field(EncodingSpec(num_directions=2), widths=(8, 8), skip_layers=(1,), dtype=torch.float64)
    out = field_forward(field, torch.tensor(points, dtype=torch.float64))
    assert out.shape == (len(points),)
    assert torch.all(out >= 0)


def test_invalid_architecture():
    with pytest.raises(ConfigurationError):
        NeuralField(EncodingSpec(), output="identity")
    with pytest.raises(ConfigurationError):
        NeuralField(EncodingSpec(), activation="gelu")
    with pytest.raises(ConfigurationError):
        NeuralField(EncodingSpec(), widths=(8, 8), skip_layers=(0,))


def test_field_gradients_match_finite_differences():
    field = init_field(EncodingSpec(num_radial=3, num_axial=2, radial_max=4, axial_max=2), widths=(6, 6),
                       skip_layers=(1,), activation="tanh", dtype=torch.float64, seed=2)
    rng = np.random.default_rng(0)
    coords = torch.as_tensor(rng.uniform(-1, 1, (10, 3)))
    up = torch.as_tensor(rng.standard_normal(10))
    grad = field_gradients(field, coords, up)
    theta = field.flat_parameters().clone()
    for i in rng.choice(theta.numel(), 20, replace=False):
        e = torch.zeros_like(theta)
        e[i] = 1e-6
        field.load_flat_parameters(theta + e)
        plus = float((field(coords) * up).sum())
        field.load_flat_parameters(theta - e)
        minus = float((field(coords) * up).sum())
        assert float(grad[i]) == pytest.approx((plus - minus) / 2e-6, rel=1e-5, abs=1e-9)
    field.load_flat_parameters(theta)


def test_save_load_roundtrip(tmp_path):
    field = init_field(EncodingSpec(num_directions=3), widths=(8, 8, 8), skip_layers=(2,), seed=3)
    path = tmp_path / "field.bin"
    save_field(field, path)
    loaded = load_field(path)
    torch.testing.assert_close(loaded.flat_parameters(), field.flat_parameters())
    assert loaded.config_dict() == field.config_dict()
    assert loaded.seed == 3
    c = grid_coordinates((2, 4, 4))
    torch.testing.assert_close(loaded(c), field(c))


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"JUNKJUNK")
    with pytest.raises(ConfigurationError):
        load_field(path)
