"""
PDE datasets
============

Generate a handful of trajectories from each of the four desk-scale presets,
look at their shapes and check the conservation laws each solver should keep.
"""

import numpy as np

from lnop.presets import PRESETS
from lnop.solvers import generate_dataset

desk = PRESETS["desk"]

# Every preset knows its final array shape before anything is integrated.
for name, preset in desk.items():
    print(f"{name:8s} {preset.spec.pde.value:20s} shape {preset.shape}")

# A few trajectories of each, seeded so reruns are identical.
data = {}
for name in ("ns-1e5", "burgers", "sw", "rd"):
    p = desk[name]
    data[name] = generate_dataset(p.spec.pde, 4, p.spec, seed=0, test_count=1, tag=name)
    v = data[name].values
    print(f"{name:8s} values {v.shape} range [{v.min():+.3f}, {v.max():+.3f}]")

# Navier-Stokes vorticity has zero mean and keeps it.
w = data["ns-1e5"].values.astype(np.float64)
print("NS mean vorticity, max over frames:", np.abs(w.mean(axis=(2, 3, 4))).max())

# Burgers conserves the spatial mean of u; energy only decays.
u = data["burgers"].values.astype(np.float64)
m = u.mean(axis=(2, 3, 4))
print("Burgers relative mean drift:", np.abs(m - m[:, :1]).max() / np.abs(m[:, 0]).max())

# Shallow water on reflective walls keeps its total depth.
h = data["sw"].values.astype(np.float64).sum(axis=(2, 3, 4))
print("SW relative mass drift:", np.abs(h - h[:, :1]).max() / h[:, 0].max())

# Reaction-diffusion carries two channels (activator, inhibitor).
print("RD channels:", data["rd"].channels)
