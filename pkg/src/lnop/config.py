"""Run configuration: ``section.key = value`` text files plus command-line overrides.

Every key has a declared type; unknown keys and unparsable values are errors.
Lines starting with ``#`` (and trailing ``# ...``) are comments.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(x) for x in str(s).split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _names(s):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _opt_int(s):
    return None if str(s).strip().lower() in ("", "none") else int(s)


SCHEMA = {
    "run": {"tag": (str, ""), "seed": (int, 0), "output_dir": (str, "runs")},
    "data": {"dir": (str, ""), "scale": (str, "desk"), "datasets": (_names, ()), "count": (_opt_int, None),
             "test_count": (_opt_int, None)},
    "model": {"variant": (str, "S"), "layers": (_opt_int, None), "tokens": (_opt_int, None),
              "dim": (_opt_int, None), "heads": (_opt_int, None), "ffn_ratio": (_opt_int, None),
              "proj_layers": (_opt_int, None), "score_layers": (_opt_int, None),
              "trunk_scale": (float, 10.0), "score_gain": (float, 4.0)},
    "train": {"epochs": (int, 50), "batch_size": (int, 16), "max_lr": (float, 1e-3), "weight_decay": (float, 1e-4),
              "pct_start": (float, 0.3), "div_factor": (float, 25.0), "final_div_factor": (float, 1e4),
              "grad_clip": (float, 1.0), "history": (int, 10), "checkpoint_every": (int, 0),
              "val_every": (int, 1), "freeze": (str, "none")},
    "eval": {"fractions": (_floats, (0.1, 0.3, 0.5, 0.8, 1.0)), "axis": (str, "token_dim"),
             "values": (_ints, ()), "scratch": (_bool, False)},
}


def defaults():
    return {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def _set(cfg, dotted, raw, where):
    if "." not in dotted:
        raise ConfigError(f"{where}: key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"{where}: unknown config key {dotted!r}")
    conv = SCHEMA[section][key][0]
    try:
        cfg[section][key] = conv(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {dotted}: {exc}") from None


def parse_text(text, cfg=None, source="<text>"):
    cfg = cfg if cfg is not None else defaults()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = body.split("=", 1)
        _set(cfg, key.strip(), value, f"{source}:{lineno}")
    return cfg


def load(path=None, overrides=()):
    """Defaults, then the file (if any), then ``--set`` overrides in order."""
    cfg = defaults()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        parse_text(p.read_text(encoding="utf-8"), cfg, str(p))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set(cfg, key.strip(), value, "--set")
    return cfg


def _show(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return "none" if v is None else str(v)


def dump(cfg):
    lines = []
    for section in SCHEMA:
        for key in SCHEMA[section]:
            lines.append(f"{section}.{key} = {_show(cfg[section][key])}")
    return "\n".join(lines) + "\n"


def digest(cfg):
    return hashlib.sha256(dump(cfg).encode()).hexdigest()[:16]
