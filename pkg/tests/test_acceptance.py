"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The slow criteria (training sanity, trend suite, determinism) share desk-scale
datasets generated once through the CLI.
"""

import math
import shutil
import time
import warnings

import numpy as np
import pytest

from acceptlog import criterion
from gradcheck import numeric_grad, rel_error
from lnop.cli import main as cli
from lnop.datastore import (
    batch_schedule,
    dataset_path,
    read,
    subsample_fraction,
    windows,
    write,
)
from lnop.diffmath import (
    Tensor,
    concat,
    exp,
    gelu,
    layernorm,
    linear,
    log,
    matmul,
    mlp_forward,
    softmax,
    sqrt,
    tanh,
)
from lnop.evalsuite import evaluate, persistence_error
from lnop.fields import Field, Grid2D, GrfSpec, grf_coefficients, radial_bump, sample_grf
from lnop.lno import Checkpoint, LNOConfig, LNOModel, count_params
from lnop.solvers import BC, PDE, SolveSpec, simulate_burgers, simulate_ns, simulate_rd, simulate_swe
from lnop.trainer import Freeze, TrainConfig, finetune, train, two_stage
from test_lno import SHIFT_INVARIANT, toy_model

AUX_COUNT = 40  # trajectories per auxiliary pretraining dataset (sw, burgers, rd)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("desk")
    for pde in ("ns-1e5", "ns-1e3"):
        assert cli(["generate", "--pde", pde, "--scale", "desk", "--data-dir", str(d)]) == 0
    for pde in ("burgers", "sw", "rd"):
        assert cli(["generate", "--pde", pde, "--scale", "desk", "--count", str(AUX_COUNT), "--test-count", "8",
                    "--data-dir", str(d)]) == 0
    return d


def load(data_dir, name):
    return read(dataset_path(name, "desk", data_dir))


def in_memory(model):
    return Checkpoint(model.copy(), {}, {})


# -- gradient suite -----------------------------------------------------------------------


def _op_error(fn, arrays, seed):
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal(fn(*[Tensor(a) for a in arrays]).shape)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    (fn(*ts) * Tensor(weights)).sum().backward()
    num = numeric_grad(lambda *a: float((fn(*[Tensor(x) for x in a]).data * weights).sum()),
                       [a.copy() for a in arrays])
    return max(rel_error(t.grad, g) for t, g in zip(ts, num))


def _op_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    r = lambda *s: rng.standard_normal(s)
    return {
        "matmul": (matmul, [r(3, 4), r(4, 5)]),
        "batched matmul": (matmul, [r(2, 3, 4), r(4, 2)]),
        "softmax": (lambda x: softmax(x, axis=-1), [r(3, 6) * 3]),
        "softmax axis 0": (lambda x: softmax(x, axis=0), [r(5, 4) * 3]),
        "layernorm": (layernorm, [r(4, 6), r(6), r(6)]),
        "gelu": (gelu, [r(3, 5) * 2]),
        "linear": (linear, [r(2, 3, 4), r(4, 5), r(5)]),
        "mlp": (lambda x, a, b, c, d: mlp_forward(x, [(a, b), (c, d)]), [r(4, 3), r(3, 6), r(6), r(6, 2), r(2)]),
        "arithmetic": (lambda a, b: ((a * b - a / (b * b + 1.0)) ** 2).sum(axis=0) + a.mean(), [r(3, 4), r(1, 4)]),
        "exp": (exp, [r(3, 4)]),
        "log": (log, [pos(3, 4)]),
        "sqrt": (sqrt, [pos(3, 4)]),
        "tanh": (tanh, [r(3, 4)]),
        "structural": (lambda a, b: concat([a, b], axis=-1).reshape(2, 3, -1).transpose(0, 2, 1)[:, 1:, :],
                       [r(6, 2), r(6, 3)]),
    }


def test_gradient_suite():
    with criterion("gradient suite (ops < 1e-4, end-to-end toy < 1e-3, < 2 min)") as c:
        t0 = time.perf_counter()
        worst = {}
        for seed in range(3):
            for name, (fn, arrays) in _op_cases(np.random.default_rng(seed)).items():
                worst[name] = max(worst.get(name, 0.0), _op_error(fn, arrays, seed + 100))
        bad = {k: v for k, v in worst.items() if not v < 1e-4}
        assert not bad, f"ops above 1e-4: {bad}"

        # toy model M=4, d=8, N=16 (4x4 lattice), K=2, L=1
        m = toy_model(5)
        assert (m.config.tokens, m.config.dim, m.config.history, m.config.layers) == (4, 8, 2, 1)
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((1, 2, 4, 4))
        loss = lambda: (m.apply(x) * Tensor(w)).sum()
        m.params.zero_grad()
        loss().backward()
        names = m.params.names()
        num = numeric_grad(lambda *a: loss().item(), [m.params[n].data for n in names], h=1e-4)
        e2e = rel_error(np.concatenate([m.params[n].grad.ravel() for n in names]),
                        np.concatenate([g.ravel() for g in num]))
        assert e2e < 1e-3, f"end-to-end rel error {e2e:.2e}"
        for n, g in zip(names, num):
            if n in SHIFT_INVARIANT or n.endswith("attn.k.bias"):
                continue
            assert rel_error(m.params[n].grad, g) < 1e-3, n
        took = time.perf_counter() - t0
        assert took < 120, f"took {took:.0f} s"
        c["detail"] = f"worst op {max(worst.values()):.1e}, end-to-end {e2e:.1e}"


# -- PhCA invariants ------------------------------------------------------------------------


def test_phca_invariants():
    with criterion("PhCA invariants (perm/dup 1e-6, softmax sums 1e-6, decoder per-query, < 1 min)") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        perm_err = dup_err = sum_err = dec_err = 0.0
        for trial in range(30):
            m = toy_model(trial % 5)
            n = int(rng.integers(1, 80))
            pos, vals = rng.uniform(0, 1, (n, 2)), rng.standard_normal((n, 4))
            z = m.encode(pos, vals).data
            p = rng.permutation(n)
            perm_err = max(perm_err, np.abs(m.encode(pos[p], vals[p]).data - z).max())
            dup = m.encode(np.concatenate([pos, pos]), np.concatenate([vals, vals])).data
            dup_err = max(dup_err, np.abs(dup - z).max())
            sum_err = max(sum_err, np.abs(m.encoder_weights(pos).data.sum(axis=1) - 1).max(),
                          np.abs(m.decoder_weights(pos).data.sum(axis=1) - 1).max())
            q = rng.uniform(0, 1, (n, 2))
            full = m.decode(z, q).data
            for j in rng.choice(n, size=min(n, 5), replace=False):
                dec_err = max(dec_err, np.abs(m.decode(z, q[j : j + 1]).data[0] - full[j]).max())
        assert perm_err < 1e-6 and dup_err < 1e-6 and sum_err < 1e-6, (perm_err, dup_err, sum_err)
        # single-query vs batched decode differ only by BLAS summation order
        assert dec_err < 1e-13, dec_err
        assert time.perf_counter() - t0 < 60
        c["detail"] = f"perm {perm_err:.1e}, dup {dup_err:.1e}, sums {sum_err:.1e}, decoder {dec_err:.1e}"


# -- solver oracles -------------------------------------------------------------------------


def _rk4(y, k, T, dt):
    f = lambda a, b: np.array([a - a**3 - k - b, a - b])
    for _ in range(int(round(T / dt))):
        k1 = f(*y)
        k2 = f(*(y + 0.5 * dt * k1))
        k3 = f(*(y + 0.5 * dt * k2))
        k4 = f(*(y + dt * k3))
        y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def test_solver_oracles():
    with criterion("solver oracles (TG 1e-3, Burgers mean 1e-6, SW mass 1e-8 / symmetry 1e-10, RD 1e-4)") as c:
        t0 = time.perf_counter()
        g64 = Grid2D(64, 64)
        X, Y = g64.mesh()
        w0 = np.cos(2 * math.pi * X) * np.cos(2 * math.pi * Y)
        spec = SolveSpec(PDE.NAVIER_STOKES, {"nu": 1e-3}, 1.5, 3, 1e-2, g64, BC.PERIODIC, options={"forcing": False})
        traj = simulate_ns(Field(g64, w0[None]), spec)
        assert traj.times[-1] == pytest.approx(1.0)
        amp = np.sum(traj.values[-1, 0] * w0) / np.sum(w0 * w0)
        tg = abs(amp / math.exp(-8 * math.pi**2 * 1e-3) - 1)
        assert tg < 1e-3, tg

        box = Grid2D(32, 32, -1, 1, -1, 1)
        drift = 0.0
        for seed in range(3):
            u0 = 10 * sample_grf(box, GrfSpec(seed=seed)).values
            tr = simulate_burgers(Field(box, u0), SolveSpec(PDE.BURGERS, {"D": 0.001 / math.pi}, 1.0, 20,
                                                                  1e-3, box, BC.PERIODIC))
            means = tr.values.mean(axis=(1, 2, 3))
            drift = max(drift, np.max(np.abs(means - means[0])) / abs(means[0]))
        assert drift < 1e-6, drift

        sw = Grid2D(32, 32, -2.5, 2.5, -2.5, 2.5, periodic=False)
        ic = radial_bump(sw, 0.5).values[0]
        ic = np.maximum(np.maximum(ic, ic[::-1]), np.maximum(ic[:, ::-1], ic.T))
        tr = simulate_swe(Field(sw, ic[None]), SolveSpec(PDE.SHALLOW_WATER, {"g": 1.0}, 0.5, 10, 2.5e-3, sw,
                                                         BC.DIRICHLET))
        mass = tr.values.sum(axis=(1, 2, 3))
        mass_err = np.max(np.abs(mass - mass[0])) / mass[0]
        h = tr.values[:, 0]
        sym = max(np.abs(h - h[:, ::-1]).max(), np.abs(h - h[:, :, ::-1]).max(), np.abs(h - h.transpose(0, 2, 1)).max())
        assert mass_err < 1e-8 and sym < 1e-10, (mass_err, sym)

        neu = Grid2D(32, 32, -1, 1, -1, 1, periodic=False)
        spec = SolveSpec(PDE.REACTION_DIFFUSION, {"D1": 1e-30, "D2": 1e-30, "k": 5e-3}, 10.0, 20, 5e-3, neu,
                         BC.NEUMANN)
        tr = simulate_rd(Field(neu, np.stack([np.full((32, 32), 0.5), np.full((32, 32), 0.1)])), spec)
        y = _rk4(np.array([0.5, 0.1]), 5e-3, tr.times[-1], 5e-5)
        rd = np.max(np.abs(tr.values[-1].mean(axis=(1, 2)) - y)) / np.max(np.abs(y))
        assert rd < 1e-4, rd
        assert time.perf_counter() - t0 < 600
        c["detail"] = f"TG {tg:.1e}, Burgers {drift:.1e}, SW mass {mass_err:.1e} sym {sym:.1e}, RD {rd:.1e}"


# -- GRF statistics -------------------------------------------------------------------------


def test_grf_statistics():
    with criterion("GRF statistics (mode variance 5% for |k|<=8, zero mean 3 SE, 10k samples)") as c:
        t0 = time.perf_counter()
        g = Grid2D(32, 32)
        spec = GrfSpec()
        n = 10_000
        power = np.zeros((32, 32))
        means = np.empty(n)
        for s in range(n):
            coeff = grf_coefficients(g, spec.with_seed(s))
            power += np.abs(coeff) ** 2
            means[s] = np.real(np.fft.ifft2(coeff)).mean() * 32 * 32
        power /= n
        k = np.fft.fftfreq(32, 1 / 32)
        worst = 0.0
        for iy, ky in enumerate(k):
            for ix, kx in enumerate(k):
                if kx * kx + ky * ky <= 64:
                    worst = max(worst, abs(power[iy, ix] / spec.mode_std(kx, ky) ** 2 - 1))
        se = means.std(ddof=1) / math.sqrt(n)
        assert worst < 0.05, worst
        assert abs(means.mean()) < 3 * se, (means.mean(), se)
        assert time.perf_counter() - t0 < 120
        c["detail"] = f"worst mode deviation {100 * worst:.2f}%, mean {means.mean():.1e} (3 SE = {3 * se:.1e})"


# -- data plumbing ----------------------------------------------------------------------------


def test_data_plumbing(tmp_path, data_dir):
    with criterion("data plumbing (bit-exact round trip, window counts, sampler coverage, fractions)") as c:
        ns = load(data_dir, "ns-1e5")
        back = read(write(ns, tmp_path / "copy.lnopds"))
        assert back.values.tobytes() == ns.values.tobytes() and back.manifest == ns.manifest
        w = windows(ns, 10, "train")
        assert len(w) == 10 * len(ns.train_idx) == sum(ns.n_frames - 10 for _ in ns.train_idx)
        others = [load(data_dir, p) for p in ("burgers", "sw", "rd")]
        wl = [windows(d, 10, "train") for d in [ns] + others]
        for seed in range(3):
            seen = [[] for _ in wl]
            for d, idx in batch_schedule(wl, 16, seed):
                seen[d].extend(idx)
            assert all(sorted(s) == sorted(x) and len(s) == len(set(s)) for s, x in zip(seen, wl))
        for f in (0.1, 0.3, 0.5, 0.8, 1.0):
            sub = subsample_fraction(ns, f, seed=0)
            assert len(sub.train_idx) == math.floor(round(f * 80, 9))
            assert np.array_equal(sub.test_idx, ns.test_idx)
        c["detail"] = f"{len(w)} windows over {len(ns.train_idx)} trajectories, 4-dataset sampler exact"


# -- model budget -----------------------------------------------------------------------------


def test_model_budget():
    with criterion("model budget (S in [0.64M, 0.96M], L in [4.0M, 6.0M])") as c:
        s, l = count_params(LNOConfig.small()), count_params(LNOConfig.large())
        assert 0.64e6 <= s <= 0.96e6 and 4.0e6 <= l <= 6.0e6, (s, l)
        c["detail"] = f"S {s:,}, L {l:,}"


# -- training sanity ----------------------------------------------------------------------------


def test_training_sanity(data_dir):
    with criterion("training sanity (LNO-S desk NS 50 epochs: < 0.35, >= 20% below persistence, < 60 min)") as c:
        ns = load(data_dir, "ns-1e5")
        t0 = time.perf_counter()
        model, _ = train(LNOModel(LNOConfig.small(), seed=0), [ns], TrainConfig(epochs=50, val_every=0))
        err = evaluate(model, ns, K=10).mean
        took = time.perf_counter() - t0
        base = persistence_error(ns, 10)
        gain = 1 - err / base
        c["detail"] = f"rollout relL2 {err:.4f}, persistence {base:.4f}, gain {100 * gain:.1f}%, {took / 60:.1f} min"
        assert err < 0.35 and gain >= 0.2 and took < 3600, c["detail"]


# -- trend suite ----------------------------------------------------------------------------------

# sharper initial attention so short hybrid pretraining leaves the uniform-attention plateau
TREND_MODEL = LNOConfig(layers=2, tokens=32, dim=64, heads=4, history=10, channels=2, score_gain=16.0)
TREND_SEEDS = (0, 1, 2)
TREND_EPOCHS, TREND_PRETRAIN = 8, 12


def _trend_cfg(seed, epochs, **kw):
    return TrainConfig(epochs=epochs, batch_size=16, seed=seed, val_every=0, **kw)


def _judge(name, better, worse):
    """Paired per-seed differences; inversion beyond 2 sigma fails, any inversion warns."""
    d = np.asarray(better) - np.asarray(worse)
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    text = f"{name}: {np.round(better, 4).tolist()} vs {np.round(worse, 4).tolist()}"
    if mean > 0:
        if mean > 2 * sd:
            return False, text + f" inverted by {mean:.4f} > 2 sigma ({2 * sd:.4f})"
        warnings.warn(f"trend {text} inverted by {mean:.4f} (within 2 sigma)", stacklevel=2)
        return True, text + " (soft: inverted within 2 sigma)"
    return True, text


def test_trend_suite(data_dir):
    with criterion("trend suite (a)-(d) over 3 seeds, hard fail only on > 2 sigma inversion") as c:
        ns, ns3 = load(data_dir, "ns-1e5"), load(data_dir, "ns-1e3")
        hybrid = [ns] + [load(data_dir, p) for p in ("sw", "burgers", "rd")]
        r = {k: [] for k in ("scratch", "hybrid_all", "ft30", "scratch100", "two_stage", "nonphca", "phca")}
        for seed in TREND_SEEDS:
            scratch, _ = train(LNOModel(TREND_MODEL, seed=seed), [ns], _trend_cfg(seed, TREND_EPOCHS))
            r["scratch"].append(evaluate(scratch, ns).mean)
            pre, _ = train(LNOModel(TREND_MODEL, seed=seed), hybrid, _trend_cfg(seed, TREND_PRETRAIN))
            ck = in_memory(pre)
            for key, freeze in (("hybrid_all", Freeze.ALL), ("nonphca", Freeze.NON_PHCA), ("phca", Freeze.PHCA_ONLY)):
                m, _ = finetune(ck, ns, _trend_cfg(seed, TREND_EPOCHS, freeze=freeze))
                r[key].append(evaluate(m, ns).mean)
            # the 30% finetune gets as many optimizer steps as the full-data scratch run
            part = subsample_fraction(ns3, 0.3, seed)
            m, _ = finetune(ck, part, _trend_cfg(seed, round(TREND_EPOCHS / 0.3), freeze=Freeze.ALL))
            r["ft30"].append(evaluate(m, ns3).mean)
            m, _ = train(LNOModel(TREND_MODEL, seed=seed), [ns3], _trend_cfg(seed, TREND_EPOCHS))
            r["scratch100"].append(evaluate(m, ns3).mean)
            ae, _ = two_stage(hybrid, _trend_cfg(seed, TREND_EPOCHS), TREND_MODEL, target=[ns])
            r["two_stage"].append(evaluate(ae, ns).mean)
        verdicts = [
            _judge("(a) hybrid+All <= scratch", r["hybrid_all"], r["scratch"]),
            _judge("(b) transfer 30% <= scratch 100%", r["ft30"], r["scratch100"]),
            _judge("(c) end-to-end < two-stage", r["scratch"], r["two_stage"]),
            _judge("(d) NonPhCA < PhCAOnly", r["nonphca"], r["phca"]),
        ]
        for ok, text in verdicts:
            print(f"[trend] {'ok  ' if ok else 'FAIL'} {text}")
        c["detail"] = "; ".join(t for _, t in verdicts)
        assert all(ok for ok, _ in verdicts), c["detail"]


# -- freezing contracts ---------------------------------------------------------------------------


def test_freezing_contracts(data_dir):
    with criterion("freezing contracts (frozen groups bit-identical across a finetune epoch)") as c:
        ns = subsample_fraction(load(data_dir, "ns-1e5"), 0.25, seed=0)
        cfg = LNOConfig(layers=1, tokens=16, dim=32, heads=4, history=10, channels=2)
        ck = in_memory(LNOModel(cfg, seed=3))
        groups = {Freeze.NON_PHCA: ("phca.",), Freeze.PHCA_ONLY: ("prop.", "proj.")}
        checked = 0
        for freeze, frozen in groups.items():
            m, _ = finetune(ck, ns, TrainConfig(epochs=1, freeze=freeze, val_every=0))
            for n, t in ck.model.params.items():
                moved = t.data.tobytes() != m.params[n].data.tobytes()
                if n.startswith(frozen):
                    assert not moved, f"{freeze.value}: frozen {n} changed"
                    checked += 1
                elif not n.endswith("enc_score.1.bias"):  # softmax shift: zero gradient, decays only
                    assert moved, f"{freeze.value}: trainable {n} did not move"
        c["detail"] = f"{checked} frozen tensors bit-identical over NonPhCA and PhCAOnly"


# -- determinism ----------------------------------------------------------------------------------


def test_determinism(tmp_path):
    with criterion("determinism (identical desk runs give identical checkpoints and CSVs)") as c:
        data, runs = tmp_path / "data", tmp_path / "runs"
        common = ["--data-dir", str(data), "--output-dir", str(runs), "--set", "train.epochs=1"]
        files = ["data/ns-1e5/desk.lnopds", "runs/pre/final.lnop", "runs/pre/metrics.csv", "runs/pre/config.txt",
                 "runs/ev/ns-1e5_eval.csv", "runs/ev/report.csv"]
        outs = []
        for _ in range(2):
            assert cli(["generate", "--pde", "ns-1e5", "--scale", "desk", "--data-dir", str(data)]) == 0
            assert cli(["pretrain", "--datasets", "ns-1e5", "--model", "S", "--tag", "pre", *common]) == 0
            ck = runs / "pre" / "final.lnop"
            assert cli(["evaluate", "--checkpoint", str(ck), "--dataset", "ns-1e5", "--tag", "ev", *common]) == 0
            outs.append({f: (tmp_path / f).read_bytes() for f in files})
            shutil.rmtree(data)
            shutil.rmtree(runs)
        for f in files:
            assert outs[0][f] == outs[1][f], f
        c["detail"] = f"{len(files) - 1} run files and the dataset byte-identical (same command lines, 1-epoch LNO-S)"
