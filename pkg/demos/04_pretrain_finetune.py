"""
Hybrid pretraining and finetuning
=================================

Pretrain one model on several PDEs at once, then finetune it on a single
target while training all parameters, only the cross-attention maps, or
everything except them. A two-stage variant (autoencoder first, latent
propagator second) is trained for comparison.
"""

from lnop.evalsuite import evaluate
from lnop.lno import Checkpoint, LNOConfig, LNOModel
from lnop.presets import get_preset
from lnop.solvers import generate_dataset
from lnop.trainer import Freeze, TrainConfig, finetune, train, two_stage


def make(name, n, test):
    p = get_preset(name, "desk")
    return generate_dataset(p.spec.pde, n, p.spec, seed=0, test_count=test, tag=name)


target = make("ns-1e5", 30, 6)
others = [make("burgers", 16, 2), make("rd", 16, 2)]
# A larger score gain sharpens the initial attention; short mixed runs otherwise
# linger on the plateau where every latent token holds the same average.
cfg = LNOConfig(layers=2, tokens=32, dim=64, heads=4, history=10, channels=2, score_gain=16.0)

# Pretrain on the mixture; every batch comes from one dataset, one LR schedule spans all.
pre, man = train(LNOModel(cfg, seed=0), [target] + others, TrainConfig(epochs=8, val_every=0))
print("pretraining loss per epoch:", [round(r["train_loss"], 4) for r in man.epochs])
ck = Checkpoint(pre, {}, {})

scratch, _ = train(LNOModel(cfg, seed=0), [target], TrainConfig(epochs=4, val_every=0))
print(f"scratch          {evaluate(scratch, target).mean:.4f}")
for freeze in (Freeze.ALL, Freeze.PHCA_ONLY, Freeze.NON_PHCA):
    model, _ = finetune(ck, target, TrainConfig(epochs=4, freeze=freeze, val_every=0))
    print(f"finetune {freeze.value:8s} {evaluate(model, target).mean:.4f}")

# Two-stage: reconstruct single frames, freeze, then learn latent dynamics.
ae, _ = two_stage([target] + others, TrainConfig(epochs=4, val_every=0), cfg, target=[target])
print(f"two-stage        {evaluate(ae, target).mean:.4f}")
