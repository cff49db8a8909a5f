"""Dataset recipes at paper scale and at desk scale.

Paper scale reproduces the published shapes (64x64 grids, 1000-1200
trajectories); desk scale keeps the physics but uses 32x32 grids and 100
trajectories (80 train / 20 test).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .fields import Grid2D
from .solvers import BC, PDE, SolveSpec


@dataclass(frozen=True)
class Preset:
    name: str
    spec: SolveSpec
    count: int
    test_count: int

    @property
    def shape(self):
        """Dataset extents ``[Ntraj, T, C, H, W]`` without running the solver."""
        s = self.spec
        c = 2 if s.pde is PDE.REACTION_DIFFUSION else 1
        return (
            self.count,
            s.frames // s.frame_stride,
            c,
            s.grid.ny // s.spatial_stride,
            s.grid.nx // s.spatial_stride,
        )


def _unit(n):
    return Grid2D(n, n, 0.0, 1.0, 0.0, 1.0, periodic=True)


def _square(n, half, periodic):
    return Grid2D(n, n, -half, half, -half, half, periodic=periodic)


def _ns(nu, T, frames, n):
    return SolveSpec(PDE.NAVIER_STOKES, {"nu": nu}, T, frames, 1e-2, _unit(n), BC.PERIODIC)


def _sw(n_native):
    return SolveSpec(
        PDE.SHALLOW_WATER,
        {"g": 1.0},
        1.0,
        100,
        2.5e-3,
        _square(n_native, 2.5, periodic=False),
        BC.DIRICHLET,
        spatial_stride=2,
        frame_stride=5,
    )


def _burgers(n):
    return SolveSpec(PDE.BURGERS, {"D": 0.001 / math.pi}, 1.0, 20, 1e-3, _square(n, 1.0, True), BC.PERIODIC)


def _rd(n):
    return SolveSpec(
        PDE.REACTION_DIFFUSION,
        {"D1": 1e-3, "D2": 5e-3, "k": 5e-3},
        10.0,
        20,
        5e-3,
        _square(n, 1.0, False),
        BC.NEUMANN,
    )


def _build(scale):
    n = 64 if scale == "paper" else 32
    if scale == "paper":
        counts = {"ns-1e5": (1200, 100), "ns-1e4": (1100, 100), "ns-1e3": (1100, 100),
                  "sw": (1000, 100), "burgers": (1200, 100), "rd": (1200, 100)}
    else:
        counts = {k: (100, 20) for k in ("ns-1e5", "ns-1e4", "ns-1e3", "sw", "burgers", "rd")}
    specs = {
        "ns-1e5": _ns(1e-5, 20.0, 20, n),
        "ns-1e4": _ns(1e-4, 25.0, 25, n),
        "ns-1e3": _ns(1e-3, 25.0, 25, n),
        "sw": _sw(2 * n),
        "burgers": _burgers(n),
        "rd": _rd(n),
    }
    return {k: Preset(k, specs[k], *counts[k]) for k in specs}


SCALES = ("paper", "desk")
PRESETS = {scale: _build(scale) for scale in SCALES}


def get_preset(name, scale="desk"):
    try:
        return PRESETS[scale][name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r} at scale {scale!r}; known: {sorted(PRESETS['paper'])}") from None
