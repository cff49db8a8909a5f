"""Latent neural operator built around physics-cross-attention (PhCA).

Pipeline for one step::

    positions ⊕ history ──branch──▶ V [N, d]
    positions ──trunk──▶ enc score MLP ──softmax over N──▶ A [M, N]
    Z = A V                                         (M latent tokens)
    Z ──L pre-norm Transformer blocks──▶ Z'
    queries ──trunk──▶ dec score MLP ──softmax over M──▶ B [N', M]
    U = B Z' ──output projector──▶ values [N', C_max]

Every array op carries a leading batch axis; positions and queries are shared
by the whole batch, so trunk and score MLPs run once per call.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .datastore import NormStats
from .diffmath import ParamSet, Tensor, concat, layernorm, linear, matmul, mlp_forward, no_grad, softmax

CKPT_MAGIC = b"LNOPCKPT1".ljust(16, b"\0")


@dataclass(frozen=True)
class LNOConfig:
    layers: int = 4
    tokens: int = 64
    dim: int = 128
    heads: int = 8
    ffn_ratio: int = 2
    history: int = 10
    channels: int = 2
    proj_layers: int = 3  # depth of branch, trunk and output projectors
    score_layers: int = 2  # depth of encoder/decoder score MLPs (hidden width = dim)
    trunk_scale: float = 10.0  # init gain of the first trunk layer (ridges inside the unit square)
    score_gain: float = 4.0  # init gain of the last score layer (attention not uniform at step 0)
    variant: str = "custom"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"token dim {self.dim} not divisible by {self.heads} heads")
        for name in ("layers", "tokens", "dim", "heads", "ffn_ratio", "history", "channels"):
            if getattr(self, name) < 1 and not (name == "layers" and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")
        if self.proj_layers < 1 or self.score_layers < 1:
            raise ValueError("MLP depths must be at least 1")

    @classmethod
    def small(cls, **kw):
        return cls(**{"layers": 4, "tokens": 64, "dim": 128, "variant": "S", **kw})

    @classmethod
    def large(cls, **kw):
        return cls(**{"layers": 8, "tokens": 256, "dim": 256, "variant": "L", **kw})

    @classmethod
    def named(cls, name, **kw):
        table = {"S": cls.small, "L": cls.large}
        if name not in table:
            raise ValueError(f"unknown model variant {name!r}; expected S or L")
        return table[name](**kw)

    @property
    def in_width(self):
        return 2 + self.history * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _mlp_shapes(widths):
    return [(a, b) for a, b in zip(widths[:-1], widths[1:])]


def param_shapes(cfg):
    """Name → shape for every trainable tensor of a model built from ``cfg``."""
    d, M = cfg.dim, cfg.tokens
    shapes = {}

    def mlp(prefix, widths):
        for i, (a, b) in enumerate(_mlp_shapes(widths)):
            shapes[f"{prefix}.{i}.weight"] = (a, b)
            shapes[f"{prefix}.{i}.bias"] = (b,)

    hidden = [d] * (cfg.proj_layers - 1)
    mlp("proj.branch", [cfg.in_width, *hidden, d])
    mlp("phca.trunk", [2, *hidden, d])
    mlp("proj.out", [d, *hidden, cfg.channels])
    score_hidden = [d] * (cfg.score_layers - 1)
    mlp("phca.enc_score", [d, *score_hidden, M])
    mlp("phca.dec_score", [d, *score_hidden, M])
    for layer in range(cfg.layers):
        p = f"prop.{layer}"
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.gamma"] = (d,)
            shapes[f"{p}.{ln}.beta"] = (d,)
        for k in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{k}.weight"] = (d, d)
            shapes[f"{p}.attn.{k}.bias"] = (d,)
        mlp(f"{p}.ffn", [d, cfg.ffn_ratio * d, d])
    return shapes


def init_params(cfg, seed=0, dtype=np.float32):
    """Uniform fan-in init for weights, zeros for biases, unit LayerNorm gains.

    Two exceptions keep PhCA away from the uniform-attention saddle, where every
    token is the mean of V and the decoder output is constant in space: the
    first trunk layer is scaled by ``trunk_scale`` with biases spread over
    ``±trunk_scale/2``, and the last score layers are scaled by ``score_gain``.
    """
    rng = np.random.default_rng(seed)
    params = ParamSet()
    last_score = {f"phca.{side}_score.{cfg.score_layers - 1}.weight" for side in ("enc", "dec")}
    for name, shape in sorted(param_shapes(cfg).items()):
        if name.endswith(".gamma"):
            value = np.ones(shape)
        elif name == "phca.trunk.0.bias":
            value = rng.uniform(-cfg.trunk_scale / 2, cfg.trunk_scale / 2, size=shape)
        elif name.endswith((".bias", ".beta")):
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            if name == "phca.trunk.0.weight":
                bound *= cfg.trunk_scale
            elif name in last_score:
                bound *= cfg.score_gain
            value = rng.uniform(-bound, bound, size=shape)
        params.add(name, Tensor(value.astype(dtype)))
    return params


def lattice_positions(H, W, periodic=False):
    """``[H*W, 2]`` (x, y) lattice in the unit square, row-major like the fields."""
    d = 0 if periodic else 1
    x = np.arange(W) / max(W - d, 1)
    y = np.arange(H) / max(H - d, 1)
    X, Y = np.meshgrid(x, y, indexing="xy")
    return np.stack([X.ravel(), Y.ravel()], axis=-1)


def _check_positions(pos):
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos)
    if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
        raise ValueError(f"positions must be [N, 2] with N >= 1, got {pos.shape}")
    if pos.min() < -1e-6 or pos.max() > 1 + 1e-6:
        raise ValueError("positions must lie in the unit square")
    return pos


class LNOModel:
    """Parameters plus the encode / propagate / decode stages."""

    def __init__(self, config, params=None, seed=0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)

    @property
    def dtype(self):
        return self.params[self.params.names()[0]].dtype

    def astype(self, dtype):
        ps = ParamSet({n: Tensor(t.data.astype(dtype)) for n, t in self.params.items()})
        return LNOModel(self.config, ps)

    def copy(self):
        return self.astype(self.dtype)

    def count_params(self):
        return self.params.count()

    def _cast(self, x):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    # -- stages ------------------------------------------------------------
    def trunk(self, positions):
        pos = _check_positions(positions)
        return mlp_forward(self._cast(pos), self.params.slice("phca.trunk"))

    def encoder_weights(self, positions):
        """Row-normalized ``[M, N]`` attention of latent tokens over input points."""
        scores = mlp_forward(self.trunk(positions), self.params.slice("phca.enc_score"))
        return softmax(scores.transpose(1, 0), axis=-1)

    def decoder_weights(self, queries):
        """``[N, M]`` weights; each query's row is a softmax over the M tokens."""
        scores = mlp_forward(self.trunk(queries), self.params.slice("phca.dec_score"))
        return softmax(scores, axis=-1)

    def encode(self, positions, values):
        """``values`` is ``[N, K*C]`` or ``[B, N, K*C]``; returns tokens ``[(B,) M, d]``."""
        pos = _check_positions(positions)
        values = self._cast(values)
        n = pos.shape[0]
        want = self.config.history * self.config.channels
        if values.ndim not in (2, 3) or values.shape[-2:] != (n, want):
            raise ValueError(f"encode expects values [.., {n}, {want}], got {values.shape}")
        lead = values.shape[:-2]
        pos_b = np.broadcast_to(pos.astype(self.dtype), lead + (n, 2))
        feats = concat([Tensor(np.ascontiguousarray(pos_b)), values], axis=-1)
        v = mlp_forward(feats, self.params.slice("proj.branch"))
        return matmul(self.encoder_weights(pos), v)

    def _block(self, z, layer):
        P = self.params.slice(f"prop.{layer}")
        cfg = self.config
        h_count, dh = cfg.heads, cfg.dim // cfg.heads
        lead = z.shape[:-2]
        M = z.shape[-2]
        b = int(np.prod(lead)) if lead else 1
        zz = z.reshape(b, M, cfg.dim)

        h = layernorm(zz, P["ln1.gamma"], P["ln1.beta"])

        def heads(name):
            t = linear(h, P[f"attn.{name}.weight"], P[f"attn.{name}.bias"])
            return t.reshape(b, M, h_count, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
        o = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, M, cfg.dim)
        zz = zz + linear(o, P["attn.o.weight"], P["attn.o.bias"])
        h = layernorm(zz, P["ln2.gamma"], P["ln2.beta"])
        zz = zz + mlp_forward(h, P.slice("ffn"))
        return zz.reshape(*z.shape)

    def propagate(self, z):
        z = self._cast(z)
        if z.shape[-2:] != (self.config.tokens, self.config.dim):
            raise ValueError(f"latent state must end in {(self.config.tokens, self.config.dim)}, got {z.shape}")
        for layer in range(self.config.layers):
            z = self._block(z, layer)
        return z

    def decode(self, z, queries):
        """Tokens ``[(B,) M, d]`` evaluated at ``queries [N, 2]`` → ``[(B,) N, C_max]``."""
        z = self._cast(z)
        if z.shape[-2:] != (self.config.tokens, self.config.dim):
            raise ValueError(f"latent state must end in {(self.config.tokens, self.config.dim)}, got {z.shape}")
        u = matmul(self.decoder_weights(queries), z)
        return mlp_forward(u, self.params.slice("proj.out"))

    # -- lattice-level API -------------------------------------------------
    def _flatten(self, history):
        x = np.asarray(history.data if isinstance(history, Tensor) else history)
        single = x.ndim == 4
        if single:
            x = x[None]
        if x.ndim != 5:
            raise ValueError(f"history must be [K, C, H, W] or [B, K, C, H, W], got {x.shape}")
        B, K, C, H, W = x.shape
        if (K, C) != (self.config.history, self.config.channels):
            raise ValueError(
                f"history has K={K}, C={C}; model expects K={self.config.history}, C={self.config.channels}"
            )
        vals = x.reshape(B, K * C, H * W).transpose(0, 2, 1)
        return np.ascontiguousarray(vals, dtype=self.dtype), single, (H, W)

    def apply(self, history, positions=None, propagate=True):
        """Differentiable next-step map on lattice input; returns a Tensor ``[B, C, H, W]``.

        With ``propagate=False`` the latent tokens go straight to the decoder
        (the autoencoder path).
        """
        vals, _, (H, W) = self._flatten(history)
        pos = lattice_positions(H, W) if positions is None else positions
        z = self.encode(pos, vals)
        if propagate:
            z = self.propagate(z)
        out = self.decode(z, pos)
        B = vals.shape[0]
        return out.transpose(0, 2, 1).reshape(B, self.config.channels, H, W)

    def forward_step(self, history, positions=None):
        """Next frame for ``[K, C, H, W]`` (or a batch of) histories, as a numpy array."""
        with no_grad():
            out = self.apply(history, positions).data
        single = np.asarray(history).ndim == 4
        return out[0] if single else out

    def rollout(self, initial, steps, positions=None, mask=None, on_nan="raise"):
        """Autoregressive prediction of ``steps`` frames from ``initial [(B,) K, C, H, W]``.

        The history window slides over the model's own predictions only.
        ``mask`` zeroes padded channels of each prediction before it is fed back.
        """
        if steps < 1:
            raise ValueError("rollout needs steps >= 1")
        hist = np.array(initial, dtype=self.dtype)
        single = hist.ndim == 4
        if single:
            hist = hist[None]
        preds = []
        for step in range(steps):
            nxt = self.forward_step(hist, positions)
            if mask is not None:
                nxt = nxt * np.asarray(mask, dtype=nxt.dtype)[:, None, None]
            if on_nan == "raise" and not np.all(np.isfinite(nxt)):
                raise FloatingPointError(f"rollout produced non-finite values at step {step}")
            preds.append(nxt)
            hist = np.concatenate([hist[:, 1:], nxt[:, None]], axis=1)
        out = np.stack(preds, axis=1)
        return out[0] if single else out

    def autoencode(self, frame, positions=None):
        """Encode a single frame (history 1) and decode it at the same lattice."""
        if self.config.history != 1:
            raise ValueError("autoencode needs a model configured with history=1")
        x = np.asarray(frame)
        single = x.ndim == 3
        x = x[:, None] if not single else x[None, None]
        with no_grad():
            out = self.apply(x, positions, propagate=False).data
        return out[0] if single else out

    def compression_ratio(self, H, W):
        """Latent size M*d over lattice size N*C_max (< 1 means compressive)."""
        return self.config.tokens * self.config.dim / (H * W * self.config.channels)


def count_params(model):
    if isinstance(model, LNOConfig):
        return int(sum(np.prod(s) for s in param_shapes(model).values()))
    return model.params.count()


# -- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: LNOModel
    stats: dict  # dataset name -> NormStats
    manifest: dict


def save_checkpoint(path, model, stats=None, manifest=None):
    """Header JSON (config, blob table, stats, manifest) followed by float32 LE blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, t in model.params.items():
        b = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "config": model.config.to_dict(),
        "params": table,
        "stats": {k: v.to_dict() for k, v in (stats or {}).items()},
        "manifest": manifest or {},
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path, dtype=np.float32):
    raw = Path(path).read_bytes()
    if raw[:16] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an LNOPCKPT1 checkpoint")
    (n,) = struct.unpack("<Q", raw[16:24])
    header = json.loads(raw[24 : 24 + n].decode("utf-8"))
    base = 24 + n
    cfg = LNOConfig.from_dict(header["config"])
    expected = param_shapes(cfg)
    got = {e["name"]: tuple(e["shape"]) for e in header["params"]}
    if set(got) != set(expected):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ValueError(f"checkpoint parameter names differ: missing {missing}, unexpected {extra}")
    params = ParamSet()
    for e in header["params"]:
        name = e["name"]
        if got[name] != expected[name]:
            raise ValueError(f"parameter {name}: checkpoint shape {got[name]} != config shape {expected[name]}")
        lo = base + e["offset"]
        if lo + e["nbytes"] > len(raw):
            raise ValueError(f"checkpoint truncated inside parameter {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=lo).reshape(got[name])
        params.add(name, Tensor(arr.astype(dtype)))
    stats = {k: NormStats.from_dict(v) for k, v in header["stats"].items()}
    return Checkpoint(LNOModel(cfg, params), stats, header["manifest"])
