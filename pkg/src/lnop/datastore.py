"""Trajectory datasets: binary format, normalization, windows and batch sampling.

File layout (all integers little-endian)::

    16 bytes   magic  b"LNOPDS01" padded with NUL
    5 x u64    extents (Ntraj, T, C, H, W)
    payload    float32 values in C order, 4 * Ntraj*T*C*H*W bytes
    u64        manifest length in bytes
    manifest   UTF-8 JSON text

A ``.manifest.txt`` sidecar next to the file repeats the manifest text.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LNOPDS01".ljust(16, b"\0")
FORMAT_VERSION = 1
HEADER_BYTES = 16 + 5 * 8
DATA_DIR_ENV = "LNOP_DATA_DIR"


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetManifest:
    pde: str
    coefficients: dict
    bounds: tuple  # (x_min, x_max, y_min, y_max)
    periodic: bool
    frame_dt: float
    train_count: int
    test_count: int
    seed: int
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def to_text(self):
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        d["bounds"] = tuple(d["bounds"])
        m = cls(**d)
        if m.version != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported dataset format version {m.version}")
        return m


@dataclass
class TrajectoryDataset:
    """``values[traj, t, c, y, x]`` plus a manifest and the train/test index split."""

    values: np.ndarray
    manifest: DatasetManifest
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None

    def __post_init__(self):
        if self.values.ndim != 5:
            raise ValueError(f"dataset values must be 5-D, got {self.values.shape}")
        m = self.manifest
        if m.train_count + m.test_count != self.values.shape[0]:
            raise ValueError(
                f"split {m.train_count}+{m.test_count} does not match {self.values.shape[0]} trajectories"
            )
        if self.train_idx is None:
            self.train_idx = np.arange(m.train_count)
        if self.test_idx is None:
            self.test_idx = np.arange(m.train_count, self.values.shape[0])

    @property
    def name(self):
        return self.manifest.extra.get("tag", self.manifest.pde)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_frames(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    @property
    def coords(self):
        """``[H, W, 2]`` positions in ``[0, 1]^2``."""
        H, W = self.values.shape[3:]
        d = 0 if self.manifest.periodic else 1
        x = np.arange(W) / (W - d)
        y = np.arange(H) / (H - d)
        X, Y = np.meshgrid(x, y, indexing="xy")
        return np.stack([X, Y], axis=-1)

    def split_indices(self, split):
        if split == "train":
            return self.train_idx
        if split == "test":
            return self.test_idx
        raise ValueError(f"unknown split {split!r}")

    def frames(self, traj, start, stop):
        """``values[traj, start:stop]``; every read of trajectory data goes through here."""
        return self.values[traj, start:stop]


# -- file IO ---------------------------------------------------------------------


def dataset_path(pde, tag, data_dir=None):
    base = data_dir or os.environ.get(DATA_DIR_ENV) or "data"
    return Path(base) / pde / f"{tag}.lnopds"


def write(ds, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(ds.values, dtype="<f4")
    text = ds.manifest.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5Q", *values.shape))
        fh.write(values.tobytes(order="C"))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
    path.with_name(path.name + ".manifest.txt").write_bytes(text)
    return path


def read(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES:
        raise DatasetFormatError(
            f"truncated header: expected at least {HEADER_BYTES} bytes, got {len(raw)}"
        )
    if raw[:16] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:16]!r}")
    shape = struct.unpack("<5Q", raw[16:HEADER_BYTES])
    n_payload = 4 * int(np.prod(shape))
    end = HEADER_BYTES + n_payload
    if len(raw) < end + 8:
        raise DatasetFormatError(
            f"truncated payload: expected {n_payload} payload bytes, got {max(len(raw) - HEADER_BYTES, 0)}"
        )
    values = np.frombuffer(raw, dtype="<f4", count=n_payload // 4, offset=HEADER_BYTES)
    values = values.reshape(shape).astype(np.float32)
    (n_text,) = struct.unpack("<Q", raw[end : end + 8])
    text = raw[end + 8 :]
    if len(text) != n_text:
        raise DatasetFormatError(f"truncated manifest: expected {n_text} bytes, got {len(text)}")
    return TrajectoryDataset(values, DatasetManifest.from_text(text.decode("utf-8")))


# -- normalization ----------------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("normalization std must be positive")

    def _bc(self):
        # channel axis sits third from the end: [..., C, H, W]
        return self.mean[:, None, None], self.std[:, None, None]

    def normalize(self, x):
        m, s = self._bc()
        return ((x - m) / s).astype(np.asarray(x).dtype, copy=False)

    def denormalize(self, x):
        m, s = self._bc()
        return (x * s + m).astype(np.asarray(x).dtype, copy=False)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def compute_stats(ds, min_std=1e-8):
    """Per-channel mean/std over every frame and point of the training split only."""
    x = ds.values[ds.train_idx].astype(np.float64)
    mean = x.mean(axis=(0, 1, 3, 4))
    std = np.maximum(x.std(axis=(0, 1, 3, 4)), min_std)
    return NormStats(mean, std)


# -- windows and batching ----------------------------------------------------------


def windows(ds, K, split="train"):
    """All ``(traj, t)`` with history frames ``t-K .. t-1`` and target frame ``t``."""
    T = ds.n_frames
    if T < K + 1:
        raise ValueError(f"history K={K} needs at least {K + 1} frames, dataset has {T}")
    return [(int(i), t) for i in ds.split_indices(split) for t in range(K, T)]


@dataclass
class WindowBatch:
    inputs: np.ndarray  # [B, K, C_max, H, W], normalized, zero-padded channels
    targets: np.ndarray  # [B, C_max, H, W]
    mask: np.ndarray  # [C_max] channel validity (1 real, 0 padding)
    positions: np.ndarray  # [H*W, 2]
    dataset_id: int
    index: list  # (traj, t) per sample


def pad_channels(x, c_max, axis):
    c = x.shape[axis]
    if c > c_max:
        raise ValueError(f"dataset has {c} channels, model supports {c_max}")
    if c == c_max:
        return x
    pad = [(0, 0)] * x.ndim
    pad[axis] = (0, c_max - c)
    return np.pad(x, pad)


def channel_mask(c, c_max):
    m = np.zeros(c_max, dtype=np.float32)
    m[:c] = 1.0
    return m


def make_batch(ds, index, K, stats, c_max, dataset_id=0, dtype=np.float32):
    hist = np.stack([ds.frames(i, t - K, t) for i, t in index])
    tgt = np.stack([ds.frames(i, t, t + 1)[0] for i, t in index])
    hist = pad_channels(stats.normalize(hist.astype(np.float64)), c_max, axis=2)
    tgt = pad_channels(stats.normalize(tgt.astype(np.float64)), c_max, axis=1)
    return WindowBatch(
        inputs=hist.astype(dtype),
        targets=tgt.astype(dtype),
        mask=channel_mask(ds.channels, c_max),
        positions=ds.coords.reshape(-1, 2).astype(dtype),
        dataset_id=dataset_id,
        index=list(index),
    )


def batch_schedule(window_lists, batch_size, seed):
    """Shuffle every dataset's windows, chunk into batches, interleave the batches at random.

    Returns ``[(dataset_id, [window, ...]), ...]``; each window appears exactly once
    and a dataset's share of batches is proportional to its window count.
    """
    if not window_lists:
        raise ValueError("need at least one dataset")
    rng = np.random.default_rng(seed)
    per_ds = []
    for wl in window_lists:
        order = rng.permutation(len(wl))
        per_ds.append([[wl[j] for j in order[s : s + batch_size]] for s in range(0, len(wl), batch_size)])
    owners = np.concatenate([np.full(len(b), d) for d, b in enumerate(per_ds)]).astype(int)
    owners = owners[rng.permutation(len(owners))]
    cursor = [0] * len(per_ds)
    out = []
    for d in owners:
        out.append((int(d), per_ds[d][cursor[d]]))
        cursor[d] += 1
    return out


def hybrid_batches(datasets, batch_size, seed, K=10, stats=None, c_max=2, split="train"):
    """One epoch of single-dataset batches drawn from several datasets."""
    if not datasets:
        raise ValueError("hybrid_batches needs at least one dataset")
    if stats is None:
        stats = [compute_stats(ds) for ds in datasets]
    window_lists = [windows(ds, K, split) for ds in datasets]
    for d, idx in batch_schedule(window_lists, batch_size, seed):
        yield make_batch(datasets[d], idx, K, stats[d], c_max, dataset_id=d)


def subsample_fraction(ds, fraction, seed):
    """View keeping ``floor(fraction * train_count)`` random training trajectories."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = int(np.floor(round(fraction * len(ds.train_idx), 9)))
    if n == 0:
        raise ValueError(f"fraction {fraction} of {len(ds.train_idx)} trajectories selects none")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(ds.train_idx, size=n, replace=False))
    return TrajectoryDataset(ds.values, ds.manifest, train_idx=keep, test_idx=ds.test_idx)
