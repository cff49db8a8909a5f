"""Numerical integrators for the four PDE families and dataset generation.

* Navier-Stokes (vorticity form) and Burgers: pseudospectral on a periodic box,
  2/3-rule dealiasing, Crank-Nicolson diffusion, Heun predictor-corrector for the
  explicit terms.
* Shallow water: finite volumes with Rusanov fluxes, reflective walls, SSP-RK2.
* Reaction-diffusion: node-centred finite differences with mirror ghost points
  (homogeneous Neumann), Strang splitting of RK2 reaction and a Crank-Nicolson
  diffusion solve diagonalized by the type-I DCT.

The ``_run_*`` kernels integrate a batch of initial conditions at once
(leading batch axis); the public ``simulate_*`` wrappers take one :class:`Field`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sfft

from .datastore import DatasetManifest, TrajectoryDataset
from .fields import Field, Grid2D, GrfSpec, downsample_grid, radial_bump, sample_grf, stride_subsample


class PDE(str, enum.Enum):
    NAVIER_STOKES = "navier_stokes"
    SHALLOW_WATER = "shallow_water"
    BURGERS = "burgers"
    REACTION_DIFFUSION = "reaction_diffusion"


class BC(str, enum.Enum):
    PERIODIC = "periodic"
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


EXPECTED_BC = {
    PDE.NAVIER_STOKES: BC.PERIODIC,
    PDE.BURGERS: BC.PERIODIC,
    PDE.SHALLOW_WATER: BC.DIRICHLET,
    PDE.REACTION_DIFFUSION: BC.NEUMANN,
}
CHANNELS = {
    PDE.NAVIER_STOKES: 1,
    PDE.SHALLOW_WATER: 1,
    PDE.BURGERS: 1,
    PDE.REACTION_DIFFUSION: 2,
}


class SolverError(RuntimeError):
    """Raised when an integration becomes unstable or unphysical."""


@dataclass(frozen=True)
class SolveSpec:
    """Everything needed to integrate one PDE family.

    ``coefficients`` holds ``nu`` (NS), ``g`` (SW), ``D`` (Burgers) or
    ``D1, D2, k`` (RD). Stored frames are ``t = 0, dt_f, ..., (frames-1) dt_f``
    with ``dt_f = T / frames``. ``spatial_stride`` / ``frame_stride`` are applied
    by :func:`generate_dataset` after integration.
    """

    pde: PDE
    coefficients: dict
    T: float
    frames: int
    internal_dt: float
    grid: Grid2D
    bc: BC
    seed: int = 0
    spatial_stride: int = 1
    frame_stride: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pde", PDE(self.pde))
        object.__setattr__(self, "bc", BC(self.bc))
        if self.bc is not EXPECTED_BC[self.pde]:
            raise ValueError(f"{self.pde.value} uses {EXPECTED_BC[self.pde].value} boundaries, got {self.bc.value}")
        if self.frames < 1 or self.T <= 0 or self.internal_dt <= 0:
            raise ValueError("T, frames and internal_dt must be positive")
        ratio = self.frame_interval / self.internal_dt
        if abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ValueError(
                f"internal_dt {self.internal_dt} does not divide the frame interval {self.frame_interval}"
            )
        if self.frames % self.frame_stride:
            raise ValueError("frame_stride must divide frames")
        for name, v in self.coefficients.items():
            if name != "k" and v <= 0:
                raise ValueError(f"coefficient {name} must be positive")
        if self.pde in (PDE.NAVIER_STOKES, PDE.BURGERS) and not self.grid.periodic:
            raise ValueError("spectral solvers need a periodic grid")

    @property
    def frame_interval(self):
        return self.T / self.frames

    @property
    def steps_per_frame(self):
        return int(round(self.frame_interval / self.internal_dt))

    def with_dt(self, dt):
        return replace(self, internal_dt=dt)


@dataclass
class Trajectory:
    grid: Grid2D
    times: np.ndarray  # [T]
    values: np.ndarray  # [T, C, ny, nx]


def _record(spec, state, step_fn, extract, check=None):
    """Drive ``step_fn`` and store ``extract(state)`` at every frame."""
    out = [extract(state)]
    for frame in range(1, spec.frames):
        try:
            for _ in range(spec.steps_per_frame):
                state = step_fn(state)
        except SolverError as exc:
            raise SolverError(f"{exc} (while computing frame {frame})") from exc
        if check is not None:
            check(state, frame)
        out.append(extract(state))
    return np.stack(out, axis=1)  # [B, T, ...]


def _times(spec):
    return spec.frame_interval * np.arange(spec.frames)


# -- spectral machinery ------------------------------------------------------------


class _Spectral:
    def __init__(self, grid):
        self.grid = grid
        nx, ny = grid.nx, grid.ny
        ix = np.fft.rfftfreq(nx, d=1.0 / nx)
        iy = np.fft.fftfreq(ny, d=1.0 / ny)
        self.kx = (2 * math.pi / grid.lx) * ix[None, :]
        self.ky = (2 * math.pi / grid.ly) * iy[:, None]
        self.k2 = self.kx**2 + self.ky**2
        self.dealias = (np.abs(ix)[None, :] < nx / 3.0) & (np.abs(iy)[:, None] < ny / 3.0)
        self.h = min(grid.hx, grid.hy)

    def fwd(self, u):
        return np.fft.rfft2(u)

    def inv(self, uh):
        return np.fft.irfft2(uh, s=(self.grid.ny, self.grid.nx))


def _heun_cn(uh, nonlinear, diff_rate, dt):
    """Heun predictor-corrector for ``nonlinear`` with Crank-Nicolson on ``-diff_rate * u``."""
    a = 1.0 - 0.5 * dt * diff_rate
    b = 1.0 / (1.0 + 0.5 * dt * diff_rate)
    n0 = nonlinear(uh)
    u1 = (a * uh + dt * n0) * b
    n1 = nonlinear(u1)
    return (a * uh + 0.5 * dt * (n0 + n1)) * b


def _cfl_error(pde, value, dt):
    return SolverError(
        f"{pde}: CFL number {value:.3f} exceeds 0.8 at dt={dt}; use a smaller internal_dt"
    )


def ns_forcing(grid):
    X, Y = grid.mesh()
    s = 2 * math.pi * (X + Y)
    return 0.1 * (np.sin(s) + np.cos(s))


def _run_ns(w0, spec):
    sp = _Spectral(spec.grid)
    nu = spec.coefficients["nu"]
    dt = spec.internal_dt
    if spec.options.get("forcing", True):
        f_hat = sp.fwd(ns_forcing(spec.grid))
    else:
        f_hat = 0.0
    k2_inv = np.where(sp.k2 > 0, 1.0 / np.where(sp.k2 > 0, sp.k2, 1.0), 0.0)
    ikx, iky = 1j * sp.kx, 1j * sp.ky

    def nonlinear(wh):
        psi = wh * k2_inv  # -Lap psi = w
        u = sp.inv(iky * psi)
        v = sp.inv(-ikx * psi)
        cfl = max(np.abs(u).max(), np.abs(v).max()) * dt / sp.h
        if cfl > 0.8:
            raise _cfl_error("navier_stokes", cfl, dt)
        adv = u * sp.inv(ikx * wh) + v * sp.inv(iky * wh)
        n = -sp.fwd(adv) * sp.dealias + f_hat
        n[..., 0, 0] = 0.0
        return n

    def step(wh):
        return _heun_cn(wh, nonlinear, nu * sp.k2, dt)

    vals = _record(spec, sp.fwd(w0), step, sp.inv)
    return vals[:, :, None]


def _run_burgers(u0, spec):
    sp = _Spectral(spec.grid)
    D = spec.coefficients["D"]
    dt = spec.internal_dt
    ik_sum = 1j * (sp.kx + sp.ky)

    def nonlinear(uh):
        u = sp.inv(uh)
        cfl = np.abs(u).max() * dt / sp.h
        if cfl > 0.8:
            raise _cfl_error("burgers", cfl, dt)
        # u (d_x + d_y) u = 1/2 (d_x + d_y) u^2
        return -0.5 * ik_sum * sp.fwd(u * u) * sp.dealias

    def step(uh):
        return _heun_cn(uh, nonlinear, D * sp.k2, dt)

    vals = _record(spec, sp.fwd(u0), step, sp.inv)
    return vals[:, :, None]


# -- shallow water -------------------------------------------------------------------


def _rusanov_x(q, g):
    """Face fluxes in x for state ``q[..., 3, ny, nx]`` with reflective ghost cells."""
    h, hu, hv = q[..., 0, :, :], q[..., 1, :, :], q[..., 2, :, :]
    hp = np.concatenate([h[..., :1], h, h[..., -1:]], axis=-1)
    hup = np.concatenate([-hu[..., :1], hu, -hu[..., -1:]], axis=-1)
    hvp = np.concatenate([hv[..., :1], hv, hv[..., -1:]], axis=-1)
    u = hup / hp
    v = hvp / hp
    c = np.sqrt(g * hp)
    F = np.stack([hup, hup * u + 0.5 * g * hp * hp, hup * v], axis=-3)
    Q = np.stack([hp, hup, hvp], axis=-3)
    s = np.abs(u) + c
    a = np.maximum(s[..., :-1], s[..., 1:])[..., None, :, :]
    return 0.5 * (F[..., :-1] + F[..., 1:]) - 0.5 * a * (Q[..., 1:] - Q[..., :-1])


def _swap_xy(q):
    # transpose space and exchange the two momentum components
    qt = np.swapaxes(q, -1, -2)
    return qt[..., [0, 2, 1], :, :]


def _swe_rhs(q, g, dx, dy):
    fx = _rusanov_x(q, g)
    fy = _swap_xy(_rusanov_x(_swap_xy(q), g))
    return -(fx[..., 1:] - fx[..., :-1]) / dx - (fy[..., 1:, :] - fy[..., :-1, :]) / dy


def _run_swe(h0, spec):
    g = spec.coefficients["g"]
    dt = spec.internal_dt
    grid = spec.grid
    dx, dy = grid.hx, grid.hy
    if np.any(h0 <= 0):
        raise SolverError("shallow_water: initial depth must be positive")
    q0 = np.stack([h0, np.zeros_like(h0), np.zeros_like(h0)], axis=-3)

    def step(q):
        h = q[..., 0, :, :]
        speed = np.sqrt(q[..., 1, :, :] ** 2 + q[..., 2, :, :] ** 2) / h + np.sqrt(g * h)
        cfl = speed.max() * dt / min(dx, dy)
        if cfl > 0.8:
            raise _cfl_error("shallow_water", cfl, dt)
        q1 = q + dt * _swe_rhs(q, g, dx, dy)
        if np.any(q1[..., 0, :, :] <= 0):
            raise SolverError("shallow_water: dry state (h <= 0) in predictor stage")
        return 0.5 * (q + q1 + dt * _swe_rhs(q1, g, dx, dy))

    def check(q, frame):
        if np.any(q[..., 0, :, :] <= 0):
            raise SolverError(f"shallow_water: dry state (h <= 0) at frame {frame}")

    vals = _record(spec, q0, step, lambda q: q[..., 0, :, :].copy(), check)
    return vals[:, :, None]


# -- reaction-diffusion --------------------------------------------------------------


def _neumann_eigs(n, h):
    j = np.arange(n)
    return (2.0 * np.cos(math.pi * j / (n - 1)) - 2.0) / (h * h)


def neumann_laplacian(u, hx, hy):
    """Five-point Laplacian with mirror ghost points (zero normal derivative)."""
    ux = np.concatenate([u[..., :, 1:2], u, u[..., :, -2:-1]], axis=-1)
    uy = np.concatenate([u[..., 1:2, :], u, u[..., -2:-1, :]], axis=-2)
    return (ux[..., :, 2:] - 2 * u + ux[..., :, :-2]) / hx**2 + (
        uy[..., 2:, :] - 2 * u + uy[..., :-2, :]
    ) / hy**2


def rd_reaction(u1, u2, k):
    return u1 - u1**3 - k - u2, u1 - u2


def _run_rd(u0, spec):
    c = spec.coefficients
    D1, D2, k = c["D1"], c["D2"], c["k"]
    cross = spec.options.get("rd_cross_diffusion", False)
    dt = spec.internal_dt
    grid = spec.grid
    lam = _neumann_eigs(grid.ny, grid.hy)[:, None] + _neumann_eigs(grid.nx, grid.hx)[None, :]

    def cn_factor(D):
        return (1.0 + 0.5 * dt * D * lam) / (1.0 - 0.5 * dt * D * lam)

    f1 = cn_factor(D1)
    f2 = cn_factor(D2)

    def diffuse(u, factor):
        if factor is None:
            return u
        return sfft.idctn(sfft.dctn(u, type=1, axes=(-2, -1)) * factor, type=1, axes=(-2, -1))

    def react(u, tau):
        r1 = rd_reaction(u[..., 0, :, :], u[..., 1, :, :], k)
        mid = u + tau * np.stack(r1, axis=-3)
        r2 = rd_reaction(mid[..., 0, :, :], mid[..., 1, :, :], k)
        return u + 0.5 * tau * (np.stack(r1, axis=-3) + np.stack(r2, axis=-3))

    def step(u):
        u = react(u, 0.5 * dt)
        a = diffuse(u[..., 0, :, :], f1)
        if cross:
            b = u[..., 1, :, :] + dt * D2 * neumann_laplacian(0.5 * (u[..., 0, :, :] + a), grid.hx, grid.hy)
        else:
            b = diffuse(u[..., 1, :, :], f2)
        u = react(np.stack([a, b], axis=-3), 0.5 * dt)
        if not np.all(np.abs(u) <= 1e3):
            raise SolverError("reaction_diffusion: unstable step (max|u| > 1e3)")
        return u

    def check(u, frame):
        if not np.all(np.isfinite(u)) or np.abs(u).max() > 1e3:
            raise SolverError(f"reaction_diffusion: unstable step (max|u| > 1e3) at frame {frame}")

    return _record(spec, u0, step, lambda u: u.copy(), check)


# -- public wrappers ----------------------------------------------------------------------


_KERNELS = {
    PDE.NAVIER_STOKES: _run_ns,
    PDE.BURGERS: _run_burgers,
    PDE.SHALLOW_WATER: _run_swe,
    PDE.REACTION_DIFFUSION: _run_rd,
}


def _simulate(ic, spec, pde):
    if spec.pde is not pde:
        raise ValueError(f"spec is for {spec.pde.value}, not {pde.value}")
    if ic.grid != spec.grid:
        raise ValueError("initial condition grid differs from spec grid")
    if ic.channels != CHANNELS[pde]:
        raise ValueError(f"{pde.value} needs {CHANNELS[pde]} channel(s), got {ic.channels}")
    batch = ic.values[None].astype(np.float64)
    if CHANNELS[pde] == 1:
        batch = batch[:, 0]
    vals = _KERNELS[pde](batch, spec)[0]
    return Trajectory(spec.grid, _times(spec), vals)


def simulate_ns(ic, spec):
    """Vorticity trajectory ``[frames, 1, ny, nx]`` for forced 2D Navier-Stokes."""
    return _simulate(ic, spec, PDE.NAVIER_STOKES)


def simulate_burgers(ic, spec):
    """Scalar 2D Burgers ``u_t = D Lap u - u (u_x + u_y)``."""
    return _simulate(ic, spec, PDE.BURGERS)


def simulate_swe(ic, spec):
    """Depth trajectory of the shallow-water system started from rest."""
    return _simulate(ic, spec, PDE.SHALLOW_WATER)


def simulate_rd(ic, spec):
    """Two-species reaction-diffusion trajectory ``[frames, 2, ny, nx]``."""
    return _simulate(ic, spec, PDE.REACTION_DIFFUSION)


# -- datasets ------------------------------------------------------------------------------


def derive_seed(*parts):
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def initial_condition(spec, index, seed):
    """Initial condition for trajectory ``index`` (seeded by ``(seed, index)``)."""
    grid = spec.grid
    grf = GrfSpec(amplitude=spec.options.get("grf_amplitude", 7.0 ** (2.0 / 3.0)))
    if spec.pde is PDE.SHALLOW_WATER:
        rng = np.random.default_rng([seed, index])
        r = rng.uniform(0.3, 0.7)
        inside, outside = (2.0, 1.0) if spec.options.get("sw_invert", False) else (1.0, 2.0)
        return radial_bump(grid, r, inside, outside, squared_norm=spec.options.get("sw_squared_norm", True))
    pgrid = grid if grid.periodic else replace(grid, periodic=True)
    if spec.pde is PDE.REACTION_DIFFUSION:
        chans = [sample_grf(pgrid, grf.with_seed(derive_seed(seed, index, c))).values[0] for c in range(2)]
        return Field(grid, np.stack(chans))
    w = sample_grf(pgrid, grf.with_seed(derive_seed(seed, index))).values
    if spec.pde is PDE.NAVIER_STOKES:
        w = w - w.mean()  # a periodic vorticity field has zero mean
    return Field(grid, w)


def generate_dataset(pde, count, spec, seed, test_count=100, chunk=32, tag=None):
    """Integrate ``count`` trajectories; the last ``test_count`` form the test split.

    Returns a :class:`TrajectoryDataset` with float32 values
    ``[count, frames / frame_stride, C, ny / s, nx / s]``.
    """
    pde = PDE(pde)
    if spec.pde is not pde:
        raise ValueError(f"spec is for {spec.pde.value}, not {pde.value}")
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 0 <= test_count < count:
        raise ValueError(f"test_count {test_count} must be smaller than count {count}")
    out = []
    for start in range(0, count, chunk):
        idx = range(start, min(start + chunk, count))
        ics = np.stack([initial_condition(spec, i, seed).values for i in idx])
        if CHANNELS[pde] == 1:
            ics = ics[:, 0]
        try:
            vals = _KERNELS[pde](ics, spec)
        except SolverError as exc:
            raise SolverError(f"trajectories {idx.start}..{idx.stop - 1}: {exc}") from exc
        vals = vals[:, :: spec.frame_stride]
        vals = stride_subsample(vals, spec.spatial_stride, spec.spatial_stride)
        out.append(vals.astype(np.float32))
    values = np.concatenate(out)
    g = downsample_grid(spec.grid, spec.spatial_stride, spec.spatial_stride)
    manifest = DatasetManifest(
        pde=pde.value,
        coefficients=dict(spec.coefficients),
        bounds=(g.x_min, g.x_max, g.y_min, g.y_max),
        periodic=g.periodic,
        frame_dt=spec.frame_interval * spec.frame_stride,
        train_count=count - test_count,
        test_count=test_count,
        seed=int(seed),
        extra={
            "tag": tag or pde.value,
            "T": spec.T,
            "native_frames": spec.frames,
            "native_grid": [spec.grid.ny, spec.grid.nx],
            "internal_dt": spec.internal_dt,
            "frame_stride": spec.frame_stride,
            "spatial_stride": spec.spatial_stride,
            "options": dict(spec.options),
        },
    )
    return TrajectoryDataset(values, manifest)
