"""Neural-network primitives with fused backward passes."""

from __future__ import annotations

import math
import re

import numpy as np
from scipy.special import erf

from .tensor import Tensor, as_tensor


def softmax(x, axis=-1):
    """Softmax along ``axis``; the row maximum is subtracted first."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layernorm: last extent {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return Tensor._make(out, (x, gamma, beta), backward)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return Tensor._make(out, (x,), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[d_in, d_out]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear width mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, d_in).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out, parents, backward)


def mlp_forward(x, weights, activation=gelu):
    """Affine/activation stack; the last layer is affine only.

    ``weights`` is a sequence of ``(W, b)`` pairs or a :class:`ParamSet` slice
    whose names end in ``<i>.weight`` / ``<i>.bias``.
    """
    layers = _layers(weights)
    h = x
    for i, (w, b) in enumerate(layers):
        if i > 0 and layers[i - 1][0].shape[1] != w.shape[0]:
            raise ValueError(
                f"MLP layer {i} expects width {w.shape[0]}, previous layer gives {layers[i - 1][0].shape[1]}"
            )
        h = linear(h, w, b)
        if i < len(layers) - 1 and activation is not None:
            h = activation(h)
    return h


def _layers(weights):
    if isinstance(weights, ParamSet):
        idx = sorted({int(k.split(".")[0]) for k in weights.names()})
        return [(weights[f"{i}.weight"], weights.get(f"{i}.bias")) for i in idx]
    return list(weights)


class ParamSet:
    """Named trainable tensors plus AdamW state, iterated in lexicographic order."""

    def __init__(self, params=None):
        self._params = {}
        self.state = {}
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not re.fullmatch(r"[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*", name):
            raise ValueError(f"bad parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def __getitem__(self, name):
        return self._params[name]

    def get(self, name, default=None):
        return self._params.get(name, default)

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self.names())

    def __len__(self):
        return len(self._params)

    def slice(self, prefix):
        """View of the parameters under ``prefix.`` with the prefix stripped."""
        pre = prefix + "."
        view = ParamSet.__new__(ParamSet)
        view._params = {n[len(pre):]: t for n, t in self._params.items() if n.startswith(pre)}
        view.state = {}
        return view

    def subset(self, names):
        """New set sharing the named tensors, with fresh optimizer state."""
        view = ParamSet.__new__(ParamSet)
        view._params = {n: self._params[n] for n in names}
        view.state = {}
        return view

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def count(self):
        return int(sum(t.size for t in self._params.values()))

    def to_dict(self):
        return {n: t.data.copy() for n, t in self.items()}
