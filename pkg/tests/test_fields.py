import math

import numpy as np
import pytest

from lnop.fields import (
    Field,
    Grid2D,
    GrfSpec,
    downsample,
    grf_coefficients,
    radial_bump,
    sample_grf,
    stride_subsample,
)

SW_GRID = Grid2D(128, 128, -2.5, 2.5, -2.5, 2.5, periodic=False)


def sigma_oracle(kx, ky, L=1.0):
    # written out independently of GrfSpec.mode_std
    return 7 ** (1 / 3) * (4 * math.pi**2 * (kx * kx + ky * ky) / L**2 + 49) ** (-1.25)


def test_grid_spacing_and_validation():
    assert Grid2D(64, 64).hx == 1 / 64
    assert SW_GRID.hx == 5 / 127
    with pytest.raises(ValueError):
        Grid2D(3, 8)
    with pytest.raises(ValueError):
        Grid2D(8, 8, x_min=1.0, x_max=0.0)
    c = Grid2D(8, 8).unit_coords()
    assert c.shape == (8, 8, 2)
    assert np.all(np.diff(c[0, :, 0]) > 0) and np.all(np.diff(c[:, 0, 1]) > 0)


def test_field_validates():
    g = Grid2D(4, 4)
    with pytest.raises(ValueError):
        Field(g, np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        Field(g, np.full((1, 4, 4), np.nan))


def test_zero_mode_std_closed_form():
    assert GrfSpec().mode_std(0, 0) == pytest.approx(7 ** (-13 / 6), rel=1e-12)
    assert 7 ** (-13 / 6) == pytest.approx(0.014755, abs=1e-6)


def test_grf_determinism_and_realness():
    g = Grid2D(32, 32)
    a = sample_grf(g, GrfSpec(seed=5)).values
    b = sample_grf(g, GrfSpec(seed=5)).values
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_grf(g, GrfSpec(seed=6)).values)
    c = grf_coefficients(g, GrfSpec(seed=5))
    assert np.max(np.abs(np.fft.ifft2(c).imag)) < 1e-15


def test_grf_rejects_nonperiodic():
    with pytest.raises(ValueError):
        sample_grf(SW_GRID, GrfSpec())


def test_grf_mode_variance_k10():
    g = Grid2D(16, 16)
    c = np.array([np.fft.fft2(sample_grf(g, GrfSpec(seed=s)).values[0])[0, 1] / 256 for s in range(10_000)])
    assert np.mean(np.abs(c) ** 2) == pytest.approx(sigma_oracle(1, 0) ** 2, rel=0.05)


def test_grf_domain_rescaling():
    g = Grid2D(16, 16, -1, 1, -1, 1)
    assert GrfSpec().mode_std(1, 0, g.lx, g.ly) == pytest.approx(sigma_oracle(1, 0, L=2.0))


def test_radial_bump_paper_points():
    g = Grid2D(11, 11, -2.5, 2.5, -2.5, 2.5, periodic=False)  # includes centre and corners
    for r in (0.3, 0.5, 0.7):
        f = radial_bump(g, r).values[0]
        assert f[5, 5] == 1.0
        assert f[-1, -1] == 2.0 and f[0, 0] == 2.0


def test_radial_bump_area_fraction():
    g = Grid2D(1001, 1001, -2.5, 2.5, -2.5, 2.5, periodic=False)
    r = 0.5
    inner = np.mean(radial_bump(g, r).values == 1.0)
    assert inner == pytest.approx(math.pi * r / 25, rel=0.01)
    inner_plain = np.mean(radial_bump(g, r, squared_norm=False).values == 1.0)
    assert inner_plain == pytest.approx(math.pi * r * r / 25, rel=0.01)


def test_radial_bump_invert_flag():
    g = Grid2D(11, 11, -2.5, 2.5, -2.5, 2.5, periodic=False)
    f = radial_bump(g, 0.5, inside=2.0, outside=1.0).values[0]
    assert f[5, 5] == 2.0 and f[0, 0] == 1.0


def test_downsample_identity_and_constant():
    g = Grid2D(128, 128)
    f = Field(g, np.full((1, 128, 128), 3.25))
    assert np.array_equal(downsample(f, 1, 1).values, f.values)
    d = downsample(f, 2, 2)
    assert d.values.shape == (1, 64, 64) and np.all(d.values == 3.25)
    assert d.grid.hx == pytest.approx(2 * g.hx)


def test_stride_picks_even_indices():
    ramp = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(stride_subsample(ramp, 2, 2), [[0, 2], [8, 10]])


def test_downsample_nonperiodic_bounds_and_errors():
    f = radial_bump(SW_GRID, 0.5)
    d = downsample(f, 2, 2)
    np.testing.assert_allclose(d.grid.x, SW_GRID.x[::2])
    with pytest.raises(ValueError):
        downsample(f, 3, 3)
