"""
Training and rollout
====================

Train a small latent neural operator on a short Navier-Stokes set, then roll
it out autoregressively from ten frames and compare with the persistence
baseline (repeat the last known frame).
"""

import numpy as np

from lnop.evalsuite import evaluate, persistence_error
from lnop.lno import LNOConfig, LNOModel
from lnop.presets import get_preset
from lnop.solvers import generate_dataset
from lnop.trainer import TrainConfig, train

p = get_preset("ns-1e5", "desk")
ds = generate_dataset(p.spec.pde, 40, p.spec, seed=0, test_count=8, tag="ns-1e5")
print("dataset", ds.values.shape, "train", len(ds.train_idx), "test", len(ds.test_idx))

model = LNOModel(LNOConfig(layers=2, tokens=32, dim=64, heads=4, history=10, channels=1), seed=0)
model, manifest = train(model, [ds], TrainConfig(epochs=10, batch_size=16, val_every=5))

for row in manifest.epochs:
    extra = f"  val {row['val_ns-1e5']:.4f}" if "val_ns-1e5" in row else ""
    print(f"epoch {row['epoch']:2d}  loss {row['train_loss']:.4f}  lr {row['lr']:.2e}{extra}")

res = evaluate(model, ds, K=10)
print(f"rollout relative L2 {res.mean:.4f} +- {res.std:.4f} over {res.n_traj} trajectories")
print(f"persistence baseline {persistence_error(ds, 10):.4f}")

# Error grows along the rollout as predictions feed back into the history.
print("per-frame error:", np.round(res.frame_means(), 4))
