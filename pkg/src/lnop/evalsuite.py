"""Rollout evaluation, transfer curves, token scaling sweeps and report files."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datastore import channel_mask, compute_stats, pad_channels, subsample_fraction
from .lno import LNOModel, count_params

SUMMARY_COLUMNS = ["model", "dataset", "fraction", "mean_relL2", "std_relL2", "n_traj", "n_excluded"]


@dataclass
class EvalResult:
    dataset: str
    model: str
    per_traj: np.ndarray  # relative L2 over each trajectory's predicted block, NaN if excluded
    per_frame: np.ndarray  # [n_traj, frames] per-frame relative L2
    frames: int
    fraction: float = 1.0
    traj_ids: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def valid(self):
        return self.per_traj[np.isfinite(self.per_traj)]

    @property
    def mean(self):
        v = self.valid
        return float(v.mean()) if v.size else float("nan")

    @property
    def std(self):
        v = self.valid
        return float(v.std()) if v.size else float("nan")

    @property
    def n_traj(self):
        return int(self.valid.size)

    @property
    def n_excluded(self):
        return int(self.per_traj.size - self.valid.size)

    def frame_means(self):
        ok = np.isfinite(self.per_traj)
        return self.per_frame[ok].mean(axis=0) if ok.any() else np.full(self.frames, np.nan)


class Persistence:
    """Repeats the last input frame."""

    def forward_step(self, history):
        return np.asarray(history)[..., -1, :, :, :]


class Oracle:
    """Test hook: replays the normalized ground truth of the trajectories being evaluated."""

    def __init__(self, dataset, stats, c_max=None):
        self.ds, self.stats = dataset, stats
        self.c_max = c_max or dataset.channels
        self.ids = None

    def begin_trajectories(self, ids):
        self.ids = list(ids)

    def rollout(self, initial, steps, positions=None, mask=None, on_nan="raise"):
        K = np.asarray(initial).shape[-4]
        truth = np.stack([self.ds.values[i, K : K + steps] for i in self.ids])
        return pad_channels(self.stats.normalize(truth.astype(np.float64)), self.c_max, axis=2)


def _generic_rollout(model, init, steps, mask):
    hist, out = init, []
    for _ in range(steps):
        nxt = np.asarray(model.forward_step(hist))
        if mask is not None:
            nxt = nxt * mask[:, None, None]
        out.append(nxt)
        hist = np.concatenate([hist[:, 1:], nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


def _block_rel(pred, truth):
    axes = tuple(range(1, pred.ndim))
    return np.sqrt(((pred - truth) ** 2).sum(axis=axes)) / np.sqrt((truth**2).sum(axis=axes))


def evaluate(model, dataset, K=10, stats=None, tag="model", batch=20, split="test"):
    """Roll out every test trajectory from its first ``K`` frames and score frames ``K..T-1``.

    Predictions are denormalized once, then compared with the raw data. Rollouts
    with non-finite values are excluded from the statistics and counted.
    """
    ids = np.asarray(dataset.split_indices(split))
    T = dataset.n_frames
    if ids.size == 0:
        raise ValueError(f"{dataset.name}: empty {split} split")
    if T <= K:
        raise ValueError(f"{dataset.name}: {T} frames leave nothing to predict after K={K}")
    stats = stats or compute_stats(dataset)
    C = dataset.channels
    c_max = getattr(getattr(model, "config", None), "channels", C)
    mask = channel_mask(C, c_max)
    pos = dataset.coords.reshape(-1, 2)
    steps = T - K
    per_traj = np.full(ids.size, np.nan)
    per_frame = np.full((ids.size, steps), np.nan)

    for lo in range(0, ids.size, batch):
        chunk = ids[lo : lo + batch]
        init = np.stack([dataset.frames(i, 0, K) for i in chunk]).astype(np.float64)
        init = pad_channels(stats.normalize(init), c_max, axis=2).astype(np.float32)
        if hasattr(model, "begin_trajectories"):
            model.begin_trajectories(chunk)
        if hasattr(model, "rollout"):
            pred = model.rollout(init, steps, positions=pos, mask=mask, on_nan="ignore")
        else:
            pred = _generic_rollout(model, init, steps, mask)
        pred = stats.denormalize(np.asarray(pred, dtype=np.float64)[:, :, :C])
        truth = np.stack([dataset.frames(i, K, T) for i in chunk]).astype(np.float64)
        finite = np.all(np.isfinite(pred.reshape(len(chunk), -1)), axis=1)
        rel = _block_rel(pred, truth)
        frame_rel = np.sqrt(((pred - truth) ** 2).sum(axis=(2, 3, 4))) / np.sqrt((truth**2).sum(axis=(2, 3, 4)))
        per_traj[lo : lo + len(chunk)] = np.where(finite, rel, np.nan)
        per_frame[lo : lo + len(chunk)] = np.where(finite[:, None], frame_rel, np.nan)
    return EvalResult(dataset.name, tag, per_traj, per_frame, steps, traj_ids=ids)


def persistence_error(dataset, K=10, split="test"):
    """Mean block relative L2 of repeating frame ``K-1``, by direct array arithmetic."""
    ids = dataset.split_indices(split)
    v = dataset.values[ids].astype(np.float64)
    truth = v[:, K:]
    pred = np.broadcast_to(v[:, K - 1 : K], truth.shape)
    return float(_block_rel(pred, truth).mean())


# -- experiments --------------------------------------------------------------------


def transfer_curve(checkpoint, dataset, cfg, fractions=(0.1, 0.3, 0.5, 0.8, 1.0), scratch=False,
                   model_config=None, out_dir=None):
    """Finetune (all parameters) on growing fractions of ``dataset``; one result per fraction.

    With ``scratch=True`` a freshly initialized model of ``model_config`` (or the
    checkpoint's config) is trained on each fraction as the control.
    """
    from .lno import load_checkpoint
    from .trainer import Freeze, finetune, train

    ck = load_checkpoint(checkpoint) if not hasattr(checkpoint, "model") else checkpoint
    rows = []
    for frac in fractions:
        sub = subsample_fraction(dataset, frac, cfg.seed)
        run_dir = Path(out_dir) / f"frac{frac:g}" if out_dir is not None else None
        model, _ = finetune(ck, sub, replace(cfg, freeze=Freeze.ALL), out_dir=run_dir)
        res = evaluate(model, sub, K=cfg.history, tag="pretrained")
        res.fraction = frac
        rows.append(res)
        if scratch:
            mcfg = model_config or ck.model.config
            fresh = LNOModel(mcfg, seed=cfg.seed)
            fresh, _ = train(fresh, [sub], replace(cfg, freeze=Freeze.NONE))
            res = evaluate(fresh, sub, K=cfg.history, tag="scratch")
            res.fraction = frac
            rows.append(res)
    pre = [r for r in rows if r.model == "pretrained"]
    if not all(a.mean >= b.mean for a, b in zip(pre, pre[1:])):
        warnings.warn("transfer curve is not monotone in the data fraction", stacklevel=2)
    return rows


def data_efficiency(rows):
    """Smallest fraction where the pretrained error beats scratch at the largest fraction."""
    scratch = [r for r in rows if r.model == "scratch"]
    if not scratch:
        return None
    ref = max(scratch, key=lambda r: r.fraction).mean
    wins = [r.fraction for r in rows if r.model == "pretrained" and r.mean < ref]
    return min(wins) if wins else None


SWEEP_DEFAULTS = {"token_dim": (32, 64, 128, 192, 256), "token_count": (16, 32, 64, 128, 256)}


def scaling_sweep(axis, datasets, base_config, cfg, values=None, out_dir=None):
    """Train and evaluate one model per value of ``token_dim`` or ``token_count``."""
    from .trainer import train

    if axis not in SWEEP_DEFAULTS:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_DEFAULTS)}")
    values = tuple(values) if values is not None else SWEEP_DEFAULTS[axis]
    if not values:
        raise ValueError("sweep needs at least one value")
    key = "dim" if axis == "token_dim" else "tokens"
    rows = []
    for v in values:
        mcfg = replace(base_config, **{key: int(v)})
        for ds in datasets:
            run_dir = Path(out_dir) / f"{axis}{v}" / ds.name if out_dir is not None else None
            model, _ = train(LNOModel(mcfg, seed=cfg.seed), [ds], cfg, out_dir=run_dir)
            res = evaluate(model, ds, K=cfg.history, tag=f"{axis}={v}")
            res.extra.update({axis: int(v), "params": count_params(mcfg)})
            rows.append(res)
    return rows


# -- files --------------------------------------------------------------------------


def config_hash(config):
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_eval_csv(result, path):
    """Per-trajectory rows: block error plus one column per predicted frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = result.traj_ids if result.traj_ids is not None else np.arange(result.per_traj.size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj", "relL2", "excluded"] + [f"relL2_f{k}" for k in range(result.frames)])
        for i, tid in enumerate(ids):
            bad = not np.isfinite(result.per_traj[i])
            w.writerow([int(tid), repr(float(result.per_traj[i])), int(bad)]
                       + [repr(float(x)) for x in result.per_frame[i]])
    return path


def report(results, out_dir, config=None, seed=0, name="report"):
    """Summary CSV (one row per result) and a fixed-width text table."""
    if not results:
        raise ValueError("report needs at least one result")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(config or {})
    extra_keys = sorted({k for r in results for k in r.extra})
    n_frames = max(r.frames for r in results)
    cols = SUMMARY_COLUMNS + ["config_hash", "seed"] + extra_keys + [f"frame_{k}" for k in range(n_frames)]
    rows = []
    for r in results:
        fm = r.frame_means()
        row = {"model": r.model, "dataset": r.dataset, "fraction": repr(float(r.fraction)),
               "mean_relL2": repr(r.mean), "std_relL2": repr(r.std), "n_traj": r.n_traj,
               "n_excluded": r.n_excluded, "config_hash": chash, "seed": seed}
        row.update({k: r.extra.get(k, "") for k in extra_keys})
        row.update({f"frame_{k}": repr(float(fm[k])) for k in range(r.frames)})
        rows.append(row)
    csv_path = out / f"{name}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        w.writerows(rows)
    lines = [f"config {chash}  seed {seed}", f"{'model':<20}{'dataset':<16}{'frac':>6}{'mean':>12}{'std':>12}{'n':>6}{'excl':>6}"]
    for r in results:
        lines.append(f"{r.model:<20}{r.dataset:<16}{r.fraction:>6.2f}{r.mean:>12.5f}{r.std:>12.5f}{r.n_traj:>6}{r.n_excluded:>6}")
    (out / f"{name}.txt").write_text("\n".join(lines) + "\n")
    return csv_path


def read_report(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
