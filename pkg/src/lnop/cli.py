"""Command-line entry point: ``lnop {generate,pretrain,finetune,evaluate,sweep}``.

Exit codes: 0 success, 2 missing files or invalid configuration, 3 numerical
failure (diverged training, solver breakdown).

Settings come from defaults, then ``--config FILE``, then dedicated flags such
as ``--seed``, then ``--set section.key=value`` in order. Run outputs go to
``<run.output_dir>/<run.tag>`` together with the effective ``config.txt``.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .datastore import DatasetFormatError, compute_stats, dataset_path, read, write
from .evalsuite import evaluate, report, scaling_sweep, transfer_curve, write_eval_csv
from .lno import LNOConfig, LNOModel, load_checkpoint
from .presets import get_preset
from .solvers import SolverError, generate_dataset
from .trainer import RunManifest, TrainConfig, TrainingDiverged, finetune, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _fail(msg, code):
    print(f"lnop: error: {msg}", file=sys.stderr)
    return code


# -- settings ---------------------------------------------------------------------


def _settings(args):
    flags = []
    for opt, key in (("seed", "run.seed"), ("tag", "run.tag"), ("output_dir", "run.output_dir"),
                     ("data_dir", "data.dir"), ("scale", "data.scale")):
        v = getattr(args, opt, None)
        if v is not None:
            flags.append(f"{key}={v}")
    for opt, key in (("datasets", "data.datasets"), ("model", "model.variant"), ("freeze", "train.freeze"),
                     ("axis", "eval.axis")):
        v = getattr(args, opt, None)
        if v is not None:
            flags.append(f"{key}={v}")
    return cfgmod.load(args.config, flags + list(args.set or []))


def _train_config(s):
    t = s["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], max_lr=t["max_lr"], weight_decay=t["weight_decay"],
        pct_start=t["pct_start"], div_factor=t["div_factor"], final_div_factor=t["final_div_factor"],
        grad_clip=t["grad_clip"], seed=s["run"]["seed"], freeze=t["freeze"], datasets=s["data"]["datasets"],
        history=t["history"], checkpoint_every=t["checkpoint_every"],
        val_every=t["val_every"],
    )


def _model_config(s):
    m = s["model"]
    kw = {k: m[k] for k in ("layers", "tokens", "dim", "heads", "ffn_ratio", "proj_layers", "score_layers")
          if m[k] is not None}
    return LNOConfig.named(m["variant"], history=s["train"]["history"], trunk_scale=m["trunk_scale"],
                           score_gain=m["score_gain"], **kw)


def _run_dir(s, command, extra=""):
    if not s["run"]["tag"]:
        h = hashlib.sha256((command + extra + cfgmod.dump(s)).encode()).hexdigest()[:8]
        s["run"]["tag"] = f"{command}-{h}"
    out = Path(s["run"]["output_dir"]) / s["run"]["tag"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# lnop {__version__} {command}\n" + cfgmod.dump(s), encoding="utf-8")
    return out


def _echo(s, command, **extra):
    return {"command": command, **extra, "settings": cfgmod.dump(s).splitlines()}


def _load_dataset(name, s):
    """A preset name resolved under the data dir, or a path to a ``.lnopds`` file."""
    p = Path(name)
    if p.suffix == ".lnopds":
        path = p
    else:
        path = dataset_path(name, s["data"]["scale"], s["data"]["dir"] or None)
    if not path.exists():
        raise FileNotFoundError(f"dataset {name!r} not found at {path}; run `lnop generate --pde {name}` first")
    return read(path)


def _datasets(s):
    names = s["data"]["datasets"]
    if not names:
        raise ConfigError("no datasets given (use --datasets or data.datasets)")
    return [_load_dataset(n, s) for n in names]


def _checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# -- commands ---------------------------------------------------------------------


def cmd_generate(args):
    preset = get_preset(args.pde, args.scale)
    count = args.count or preset.count
    test = args.test_count if args.test_count is not None else min(preset.test_count, count - 1)
    shape = (count,) + preset.shape[1:]
    if args.shape_only:
        print(f"shape {list(shape)}")
        return EXIT_OK
    ds = generate_dataset(preset.spec.pde, count, preset.spec, args.seed, test_count=test, tag=args.pde)
    ds.manifest.extra.update({"preset": args.pde, "scale": args.scale})
    path = dataset_path(args.pde, args.tag or args.scale, args.data_dir)
    write(ds, path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    print(f"shape {list(ds.values.shape)}")
    print(f"sha256 {digest}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pretrain(args):
    s = _settings(args)
    data = _datasets(s)
    mcfg = _model_config(s)
    mcfg = replace(mcfg, channels=max(mcfg.channels, *(d.channels for d in data)))
    out = _run_dir(s, "pretrain")
    model = LNOModel(mcfg, seed=s["run"]["seed"])
    train(model, data, _train_config(s), out_dir=out, run_config=_echo(s, "pretrain"))
    print(f"run {out}")
    return EXIT_OK


def cmd_finetune(args):
    s = _settings(args)
    ck = _checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset, s)
    s["train"]["history"] = ck.model.config.history
    out = _run_dir(s, "finetune", f"{args.checkpoint}|{args.dataset}")
    cfg = _train_config(s)
    finetune(ck, ds, cfg, out_dir=out,
             run_config=_echo(s, "finetune", checkpoint=str(args.checkpoint), dataset=args.dataset))
    print(f"run {out}")
    return EXIT_OK


def cmd_evaluate(args):
    s = _settings(args)
    ck = _checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset, s)
    out = _run_dir(s, "evaluate", f"{args.checkpoint}|{args.dataset}")
    stats = ck.stats.get(ds.name) or compute_stats(ds)
    res = evaluate(ck.model, ds, K=ck.model.config.history, stats=stats, tag=Path(args.checkpoint).stem)
    write_eval_csv(res, out / f"{ds.name}_eval.csv")
    echo = _echo(s, "evaluate", checkpoint=str(args.checkpoint), dataset=args.dataset)
    report([res], out, config=echo, seed=s["run"]["seed"])
    man = RunManifest(echo, model=ck.model.config.to_dict(), checkpoint=str(args.checkpoint), status="done")
    man.write(out)
    print(f"{ds.name} mean relL2 {res.mean:.6g} over {res.n_traj} trajectories ({res.n_excluded} excluded)")
    print(f"run {out}")
    return EXIT_OK


def cmd_sweep(args):
    s = _settings(args)
    e = s["eval"]
    axis = e["axis"]
    if axis == "fraction":
        if not args.checkpoint:
            raise ConfigError("the fraction sweep needs --checkpoint")
        if len(s["data"]["datasets"]) != 1:
            raise ConfigError("the fraction sweep takes exactly one dataset")
        ck = _checkpoint(args.checkpoint)
        (ds,) = _datasets(s)
        s["train"]["history"] = ck.model.config.history
        cfg = _train_config(s)
        out = _run_dir(s, "sweep", str(args.checkpoint))
        rows = transfer_curve(ck, ds, cfg, fractions=e["fractions"], scratch=e["scratch"], out_dir=out)
    else:
        data = _datasets(s)
        out = _run_dir(s, "sweep")
        rows = scaling_sweep(axis, data, _model_config(s), _train_config(s), values=e["values"] or None, out_dir=out)
    echo = _echo(s, "sweep", checkpoint=str(args.checkpoint or ""))
    report(rows, out, config=echo, seed=s["run"]["seed"])
    RunManifest(echo, status="done").write(out)
    print(f"run {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="settings file with 'section.key = value' lines")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override, repeatable")
    common.add_argument("--data-dir", help="dataset root (default: $LNOP_DATA_DIR or ./data)")
    common.add_argument("--output-dir", help="run root (default: runs)")
    common.add_argument("--scale", choices=("paper", "desk"), help="dataset scale tag to load")
    common.add_argument("--seed", type=int)
    common.add_argument("--tag", help="run tag (default: command plus a settings hash)")

    p = argparse.ArgumentParser(prog="lnop", description="Latent neural operator pretraining workbench.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="integrate a dataset preset and write it")
    g.add_argument("--pde", required=True, help="preset: ns-1e5, ns-1e4, ns-1e3, sw, burgers, rd")
    g.add_argument("--scale", choices=("paper", "desk"), default="desk")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, help="override the trajectory count")
    g.add_argument("--test-count", type=int, help="override the test split size")
    g.add_argument("--data-dir")
    g.add_argument("--tag", help="file tag (default: the scale)")
    g.add_argument("--shape-only", action="store_true", help="print the dataset shape without solving")
    g.set_defaults(func=cmd_generate)

    pt = sub.add_parser("pretrain", parents=[common], help="train on one or more datasets")
    pt.add_argument("--datasets", help="comma-separated preset names or .lnopds paths")
    pt.add_argument("--model", choices=("S", "L"))
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", parents=[common], help="continue training a checkpoint on one dataset")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--dataset", required=True)
    ft.add_argument("--freeze", choices=("none", "all", "phca", "non-phca"),
                    help="parameter group to train: all, phca (encoder/decoder only) or non-phca")
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", parents=[common], help="roll out a checkpoint on a test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.set_defaults(func=cmd_evaluate)

    sw = sub.add_parser("sweep", parents=[common], help="token_dim / token_count scaling or data-fraction sweep")
    sw.add_argument("--axis", choices=("token_dim", "token_count", "fraction"))
    sw.add_argument("--datasets")
    sw.add_argument("--model", choices=("S", "L"))
    sw.add_argument("--checkpoint", help="pretrained checkpoint for the fraction sweep")
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, DatasetFormatError, KeyError) as exc:
        return _fail(exc.args[0] if exc.args else exc, EXIT_USAGE)
    except (TrainingDiverged, SolverError, FloatingPointError) as exc:
        return _fail(exc, EXIT_NUMERIC)
    except ValueError as exc:
        return _fail(exc, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
