"""
Physics cross-attention
=======================

The encoder maps any point cloud to M latent tokens, the decoder reads those
tokens back at arbitrary query points. This script shows the properties that
make it a discretization-agnostic operator: the tokens ignore point order and
duplication, and the same weights decode to any resolution.
"""

import numpy as np

from lnop.lno import LNOConfig, LNOModel, lattice_positions

cfg = LNOConfig(layers=1, tokens=8, dim=16, heads=2, history=1, channels=1)
model = LNOModel(cfg, seed=0, dtype=np.float64)
rng = np.random.default_rng(0)

# A smooth field sampled at scattered points.
pos = rng.uniform(0, 1, (300, 2))
vals = np.sin(2 * np.pi * pos[:, :1]) * np.cos(2 * np.pi * pos[:, 1:])
z = model.encode(pos, vals).data
print("latent tokens:", z.shape)

perm = rng.permutation(len(pos))
print("reordered points, max change:", np.abs(model.encode(pos[perm], vals[perm]).data - z).max())
twice = model.encode(np.concatenate([pos, pos]), np.concatenate([vals, vals])).data
print("every point duplicated, max change:", np.abs(twice - z).max())

# Each token's weights over the points form a distribution, so do each query's over tokens.
A = model.encoder_weights(pos).data
B = model.decoder_weights(pos).data
print("encoder rows sum to", A.sum(axis=1).min(), "..", A.sum(axis=1).max())
print("decoder rows sum to", B.sum(axis=1).min(), "..", B.sum(axis=1).max())

# Decode the same tokens on three lattices.
for n in (16, 32, 64):
    out = model.decode(z, lattice_positions(n, n)).data
    print(f"decoded on {n}x{n}: {out.shape}")

# The token budget for the S model compresses a 64x64 two-channel frame by this factor.
s = LNOModel(LNOConfig.small())
print("S compression ratio at 64x64:", s.compression_ratio(64, 64), "| params:", s.count_params())
