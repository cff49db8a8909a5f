"""Loss, training loops, component-selective finetuning and the two-stage variant."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import batch_schedule, channel_mask, compute_stats, make_batch, pad_channels, windows
from .diffmath import OneCycleSchedule, Tensor, adamw_step, clip_grad_norm, no_grad, onecycle_lr
from .lno import Checkpoint, LNOConfig, LNOModel, load_checkpoint, save_checkpoint
from .solvers import derive_seed


class Freeze(str, Enum):
    """Which parameter group a run trains (the rest stays frozen)."""

    NONE = "none"  # fresh model, everything trains
    ALL = "all"
    PHCA_ONLY = "phca"
    NON_PHCA = "non-phca"


class Mode(str, Enum):
    NEXT_STEP = "next_step"
    RECONSTRUCTION = "reconstruction"
    LATENT_PROPAGATION = "latent_propagation"


TRAINED_PREFIXES = {
    Freeze.NONE: ("phca.", "prop.", "proj."),
    Freeze.ALL: ("phca.", "prop.", "proj."),
    Freeze.PHCA_ONLY: ("phca.",),
    Freeze.NON_PHCA: ("prop.", "proj."),
}


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    max_lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    grad_clip: float = 1.0
    seed: int = 0
    freeze: Freeze = Freeze.NONE
    mode: Mode = Mode.NEXT_STEP
    datasets: tuple = ()
    history: int = 10
    checkpoint_every: int = 0  # epochs between checkpoints; 0 writes only the final one
    val_every: int = 1  # epochs between validation rollouts; 0 disables
    ema_beta: float = 0.9

    def __post_init__(self):
        self.freeze = Freeze(self.freeze)
        self.mode = Mode(self.mode)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["freeze"], d["mode"] = self.freeze.value, self.mode.value
        d["betas"], d["datasets"] = list(self.betas), list(self.datasets)
        return d


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    model: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)  # one dict per epoch
    timing: list = field(default_factory=list)  # seconds at the end of each epoch
    wall_clock: float = 0.0
    checkpoint: str = ""
    status: str = "running"

    def add_epoch(self, row):
        if self.epochs and row["epoch"] != self.epochs[-1]["epoch"] + 1:
            raise ValueError("epoch rows must be consecutive")
        self.epochs.append(row)

    def to_dict(self):
        return asdict(self)

    def reproducible(self):
        """The manifest without timings, as stored inside checkpoints."""
        d = self.to_dict()
        d.pop("timing")
        d.pop("wall_clock")
        return d

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        if self.epochs:
            keys = list(self.epochs[0])
            for row in self.epochs[1:]:
                keys += [k for k in row if k not in keys]
            with open(out / "metrics.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                for row in self.epochs:
                    w.writerow({k: _fmt(row.get(k, "")) for k in keys})
        return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- loss ---------------------------------------------------------------------------


def relative_l2(pred, target, mask=None):
    """Mean over the batch of ``||pred - target|| / ||target||`` per sample.

    Axis 0 is the batch axis; ``mask`` (if given) weights axis 1, e.g. the
    channel-validity mask. Returns a Tensor when ``pred`` is one, else a float.
    """
    as_t = isinstance(pred, Tensor)
    p = pred.data if as_t else np.asarray(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if p.shape != t.shape:
        raise ValueError(f"relative_l2 shape mismatch: {p.shape} vs {t.shape}")
    if p.ndim < 2:
        raise ValueError("relative_l2 expects a leading batch axis")
    w = np.ones(p.shape[1], dtype=p.dtype) if mask is None else np.asarray(mask, dtype=p.dtype)
    w = w.reshape((1, -1) + (1,) * (p.ndim - 2))
    axes = tuple(range(1, p.ndim))
    diff = (p - t) * w
    num = np.sqrt(np.sum(diff * diff, axis=axes))
    den = np.sqrt(np.sum((t * w) ** 2, axis=axes))
    if np.any(den == 0):
        raise ValueError("relative_l2: target has zero norm over the masked entries")
    ratio = num / den
    value = ratio.mean()
    if not as_t:
        return float(value)

    def backward(g):
        safe = np.where(num > 0, num, 1.0)
        scale = np.where(num > 0, 1.0 / (safe * den), 0.0) / len(num)
        scale = scale.reshape((-1,) + (1,) * (p.ndim - 1))
        return ((g * scale * diff * w).astype(p.dtype, copy=False),)

    return Tensor._make(np.asarray(value, dtype=p.dtype), (pred,), backward)


# -- batching per mode --------------------------------------------------------------


def _frame_batch(ds, index, stats, c_max, offset):
    """Input frame ``t - offset`` and target frame ``t`` as 1-frame histories."""
    x = np.stack([ds.frames(i, t - offset, t - offset + 1) for i, t in index])
    y = np.stack([ds.frames(i, t, t + 1)[0] for i, t in index])
    x = pad_channels(stats.normalize(x.astype(np.float64)), c_max, axis=2).astype(np.float32)
    y = pad_channels(stats.normalize(y.astype(np.float64)), c_max, axis=1).astype(np.float32)
    return x, y


def _mode_windows(ds, cfg):
    if cfg.mode is Mode.NEXT_STEP:
        return windows(ds, cfg.history)
    if cfg.mode is Mode.RECONSTRUCTION:
        return windows(ds, 0)
    return windows(ds, 1)


def _trainable(model, cfg):
    if cfg.mode is Mode.LATENT_PROPAGATION:
        prefixes = ("prop.",)
    elif cfg.mode is Mode.RECONSTRUCTION:
        prefixes = tuple(p for p in TRAINED_PREFIXES[cfg.freeze] if p != "prop.")
    else:
        prefixes = TRAINED_PREFIXES[cfg.freeze]
    return [n for n in model.params.names() if n.startswith(prefixes)]


def _loss(model, ds, index, stats, cfg, dataset_id):
    c_max = model.config.channels
    mask = channel_mask(ds.channels, c_max)
    pos = ds.coords.reshape(-1, 2)
    if cfg.mode is Mode.NEXT_STEP:
        b = make_batch(ds, index, cfg.history, stats, c_max, dataset_id)
        return relative_l2(model.apply(b.inputs, b.positions), b.targets, b.mask)
    if cfg.mode is Mode.RECONSTRUCTION:
        x, y = _frame_batch(ds, index, stats, c_max, offset=0)
        return relative_l2(model.apply(x, pos, propagate=False), y, mask)
    x, y = _frame_batch(ds, index, stats, c_max, offset=1)
    with no_grad():
        z0 = model.encode(pos, _values(x))
        z1 = model.encode(pos, _values(y[:, None]))
    return relative_l2(model.propagate(Tensor(z0.data)), z1.data)


def _values(hist):
    B, K, C, H, W = hist.shape
    return np.ascontiguousarray(hist.reshape(B, K * C, H * W).transpose(0, 2, 1))


# -- main loop ----------------------------------------------------------------------


def _validate(model, datasets, stats, cfg):
    from .evalsuite import evaluate

    out = {}
    for ds, st in zip(datasets, stats):
        res = evaluate(model, ds, K=cfg.history, stats=st)
        out[f"val_{ds.name}"] = res.mean
    return out


def train(model, datasets, cfg, stats=None, out_dir=None, validate=None, run_config=None):
    """Train ``model`` in place on one or more datasets; returns ``(model, manifest)``.

    Several datasets are mixed batch by batch (each batch from one dataset);
    one OneCycle schedule spans all steps. ``stats`` defaults to the train-split
    statistics of each dataset. ``run_config`` (e.g. the CLI's effective settings)
    is echoed into the manifest under ``config["run"]``.
    """
    if not datasets:
        raise ValueError("train needs at least one dataset")
    stats = list(stats) if stats is not None else [compute_stats(ds) for ds in datasets]
    names = _trainable(model, cfg)
    if not names:
        raise ValueError(f"freeze spec {cfg.freeze.value} selects no parameters")
    opt = model.params.subset(names)
    frozen = [t for n, t in model.params.items() if n not in set(names)]

    wl = [_mode_windows(ds, cfg) for ds in datasets]
    per_epoch = sum(math.ceil(len(w) / cfg.batch_size) for w in wl)
    sched = OneCycleSchedule(cfg.max_lr, cfg.epochs * per_epoch, cfg.pct_start, cfg.div_factor, cfg.final_div_factor)
    manifest = RunManifest(cfg.to_dict(), model={**model.config.to_dict(), "params": model.count_params()})
    manifest.config["trained_parameters"] = len(names)
    if run_config is not None:
        manifest.config["run"] = run_config
    t0 = time.perf_counter()
    step, ema = 0, None
    if validate is None:
        validate = cfg.mode is Mode.NEXT_STEP and cfg.val_every > 0

    for t in frozen:
        t.requires_grad = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            losses = []
            for d, index in batch_schedule(wl, cfg.batch_size, derive_seed(cfg.seed, epoch)):
                model.params.zero_grad()
                loss = _loss(model, datasets[d], index, stats[d], cfg, d)
                value = float(loss.data)
                if not math.isfinite(value):
                    manifest.status = f"diverged at step {step}"
                    manifest.wall_clock = time.perf_counter() - t0
                    if out_dir is not None:
                        manifest.write(out_dir)
                    raise TrainingDiverged(step, value)
                loss.backward()
                grads = {n: model.params[n].grad for n in names}
                for n, g in grads.items():
                    if g is None:
                        grads[n] = np.zeros_like(model.params[n].data)
                clip_grad_norm(grads, cfg.grad_clip)
                lr = onecycle_lr(sched, step)
                adamw_step(opt, grads, lr, cfg.betas[0], cfg.betas[1], cfg.eps, cfg.weight_decay)
                losses.append(value)
                ema = value if ema is None else cfg.ema_beta * ema + (1 - cfg.ema_beta) * value
                step += 1
            row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)), "ema_loss": ema,
                   "lr": onecycle_lr(sched, step)}
            manifest.timing.append(time.perf_counter() - t0)
            if validate and (epoch % max(cfg.val_every, 1) == 0 or epoch == cfg.epochs):
                row.update(_validate(model, datasets, stats, cfg))
            manifest.add_epoch(row)
            if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"epoch{epoch:04d}.lnop", model, _stats_map(datasets, stats),
                                manifest.reproducible())
    finally:
        model.params.zero_grad()
        for t in frozen:
            t.requires_grad = True

    manifest.status = "done"
    manifest.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        path = save_checkpoint(Path(out_dir) / "final.lnop", model, _stats_map(datasets, stats), manifest.reproducible())
        manifest.checkpoint = str(path)
        manifest.write(out_dir)
    return model, manifest


def _stats_map(datasets, stats):
    return {ds.name: st for ds, st in zip(datasets, stats)}


def finetune(checkpoint, dataset, cfg, out_dir=None, run_config=None):
    """Continue training a checkpoint on one dataset, training only ``cfg.freeze``'s group."""
    if isinstance(dataset, (list, tuple)):
        if len(dataset) != 1:
            raise ValueError("finetune takes exactly one dataset")
        dataset = dataset[0]
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = ck.model.copy()
    if cfg.freeze is Freeze.NONE:
        cfg = replace(cfg, freeze=Freeze.ALL)
    return train(model, [dataset], cfg, out_dir=out_dir, run_config=run_config)


# -- two-stage variant ----------------------------------------------------------------


class LatentRollout:
    """Encode once, iterate the propagator in latent space, decode once at the end."""

    def __init__(self, model):
        self.model = model
        self.config = model.config
        self.decode_log = []  # trajectories decoded per decode call

    def rollout(self, initial, steps, positions=None, mask=None, on_nan="raise"):
        m = self.model
        x = np.asarray(initial, dtype=m.dtype)
        single = x.ndim == 4
        if single:
            x = x[None]
        B, _, C, H, W = x.shape
        pos = positions if positions is not None else _default_positions(H, W)
        with no_grad():
            z = m.encode(pos, _values(x[:, -1:]))
            states = []
            for step in range(steps):
                z = m.propagate(z)
                if on_nan == "raise" and not np.all(np.isfinite(z.data)):
                    raise FloatingPointError(f"latent rollout produced non-finite values at step {step}")
                states.append(z.data)
            out = m.decode(np.stack(states, axis=1), pos).data  # [B, steps, N, C]
        self.decode_log.append(B)
        out = out.transpose(0, 1, 3, 2).reshape(B, steps, C, H, W)
        if mask is not None:
            out = out * np.asarray(mask, dtype=out.dtype)[:, None, None]
        return out[0] if single else out


def _default_positions(H, W):
    from .lno import lattice_positions

    return lattice_positions(H, W)


def two_stage(datasets, cfg, model_config, target=None, stage1_checkpoint=None, out_dir=None):
    """Stage 1: autoencoder (history 1) on per-frame reconstruction over ``datasets``.
    Stage 2: propagator on latent next-frame regression over ``target`` with the
    stage-1 weights frozen. Returns ``(LatentRollout, manifest)``.
    """
    target = list(target or datasets)
    mcfg = replace(model_config, history=1)
    if stage1_checkpoint is not None:
        if not Path(stage1_checkpoint).exists():
            raise FileNotFoundError(f"stage-1 checkpoint {stage1_checkpoint} not found")
        model = load_checkpoint(stage1_checkpoint).model
        if model.config.history != 1:
            raise ValueError("stage-1 checkpoint must come from a history=1 autoencoder")
        m1 = None
    else:
        model = LNOModel(mcfg, seed=cfg.seed)
        sub = Path(out_dir) / "stage1" if out_dir is not None else None
        model, m1 = train(model, datasets, replace(cfg, mode=Mode.RECONSTRUCTION, history=1), out_dir=sub)
    sub = Path(out_dir) / "stage2" if out_dir is not None else None
    model, m2 = train(model, target, replace(cfg, mode=Mode.LATENT_PROPAGATION, history=1), out_dir=sub)
    m2.config["stage1"] = m1.to_dict() if m1 is not None else {"checkpoint": str(stage1_checkpoint)}
    return LatentRollout(model), m2


def build_model(config, seed=0):
    if isinstance(config, str):
        config = LNOConfig.named(config)
    return LNOModel(config, seed=seed)
