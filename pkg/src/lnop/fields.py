"""Regular 2D grids, sampled fields and initial-condition samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class Grid2D:
    """Point lattice on ``[x_min, x_max] x [y_min, y_max]``.

    Periodic grids omit the right/top endpoint (spacing ``L / n``); other grids
    include both endpoints (spacing ``L / (n - 1)``).
    """

    nx: int
    ny: int
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0
    periodic: bool = True

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4 points per axis, got {self.nx}x{self.ny}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must be ordered")

    @property
    def lx(self):
        return self.x_max - self.x_min

    @property
    def ly(self):
        return self.y_max - self.y_min

    @property
    def hx(self):
        return self.lx / (self.nx if self.periodic else self.nx - 1)

    @property
    def hy(self):
        return self.ly / (self.ny if self.periodic else self.ny - 1)

    @property
    def x(self):
        return self.x_min + self.hx * np.arange(self.nx)

    @property
    def y(self):
        return self.y_min + self.hy * np.arange(self.ny)

    def mesh(self):
        """``(X, Y)`` arrays of shape ``[ny, nx]``."""
        return np.meshgrid(self.x, self.y, indexing="xy")

    def unit_coords(self):
        """Positions mapped to ``[0, 1]^2`` as an ``[ny, nx, 2]`` array of ``(x, y)``."""
        X, Y = self.mesh()
        return np.stack([(X - self.x_min) / self.lx, (Y - self.y_min) / self.ly], axis=-1)


@dataclass
class Field:
    grid: Grid2D
    values: np.ndarray  # [C, ny, nx]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[1:] != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"field values {self.values.shape} do not match grid {self.grid.ny}x{self.grid.nx}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field holds non-finite values")

    @property
    def channels(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class GrfSpec:
    """Gaussian random field with covariance ``amplitude * (-Laplacian + shift I)^(-exponent)``."""

    amplitude: float = 7.0 ** (2.0 / 3.0)
    shift: float = 49.0
    exponent: float = 2.5
    seed: int = 0

    def mode_std(self, kx, ky, lx=1.0, ly=1.0):
        """Per-mode standard deviation for integer wavenumbers on an ``lx x ly`` box."""
        lam = 4.0 * math.pi**2 * ((np.asarray(kx) / lx) ** 2 + (np.asarray(ky) / ly) ** 2)
        return math.sqrt(self.amplitude) * (lam + self.shift) ** (-self.exponent / 2.0)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def _integer_wavenumbers(grid):
    kx = np.fft.fftfreq(grid.nx, d=1.0 / grid.nx)
    ky = np.fft.fftfreq(grid.ny, d=1.0 / grid.ny)
    return np.meshgrid(kx, ky, indexing="xy")


def _mirror(spec2d):
    """Array whose entry at ``k`` is the input entry at ``-k`` (periodic indexing)."""
    return np.roll(np.flip(spec2d, axis=(-2, -1)), shift=1, axis=(-2, -1))


def grf_coefficients(grid, spec):
    """Hermitian-symmetric Fourier coefficients ``c_k`` with ``E|c_k|^2 = sigma_k^2``."""
    if not grid.periodic:
        raise ValueError("GRF sampling needs a periodic grid")
    rng = np.random.default_rng(spec.seed)
    KX, KY = _integer_wavenumbers(grid)
    sigma = spec.mode_std(KX, KY, grid.lx, grid.ly)
    shape = (grid.ny, grid.nx)
    raw = sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return 0.5 * (raw + np.conj(_mirror(raw)))


def sample_grf(grid, spec):
    """One real GRF sample on a periodic grid, as a 1-channel :class:`Field`.

    The field is ``sum_k c_k exp(2 pi i k.x / L)`` with independent complex
    Gaussian ``c_k`` averaged against their conjugate mirror.
    """
    coeff = grf_coefficients(grid, spec)
    values = np.fft.ifft2(coeff).real * (grid.nx * grid.ny)
    return Field(grid, values[None])


def radial_bump(grid, r, inside=1.0, outside=2.0, squared_norm=True):
    """Piecewise-constant disc: ``inside`` where ``|x|^2 <= r`` else ``outside``.

    With ``squared_norm=False`` the test is ``|x| <= r``.
    """
    if r <= 0:
        raise ValueError("bump radius must be positive")
    X, Y = grid.mesh()
    dist = X * X + Y * Y if squared_norm else np.sqrt(X * X + Y * Y)
    return Field(grid, np.where(dist <= r, inside, outside)[None].astype(np.float64))


def downsample_grid(grid, fx, fy):
    if grid.nx % fx or grid.ny % fy:
        raise ValueError(f"grid {grid.nx}x{grid.ny} not divisible by factors ({fx}, {fy})")
    nx, ny = grid.nx // fx, grid.ny // fy
    if grid.periodic:
        return replace(grid, nx=nx, ny=ny)
    return replace(
        grid,
        nx=nx,
        ny=ny,
        x_max=grid.x_min + (nx - 1) * fx * grid.hx,
        y_max=grid.y_min + (ny - 1) * fy * grid.hy,
    )


def stride_subsample(values, fx, fy):
    """Every ``fx``-th entry of the last axis and ``fy``-th of the one before."""
    values = np.asarray(values)
    ny, nx = values.shape[-2:]
    if nx % fx or ny % fy:
        raise ValueError(f"extents {ny}x{nx} not divisible by factors (fy={fy}, fx={fx})")
    return values[..., ::fy, ::fx].copy()


def downsample(fld, fx, fy):
    """Keep every ``fx``-th column and ``fy``-th row; no filtering."""
    values = stride_subsample(fld.values, fx, fy)
    return Field(downsample_grid(fld.grid, fx, fy), values)
