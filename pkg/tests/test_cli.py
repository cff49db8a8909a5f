import csv
import json

import numpy as np
import pytest

from lnop import config as cfgmod
from lnop.cli import main
from lnop.config import ConfigError
from lnop.datastore import read
from lnop.lno import LNOConfig, LNOModel, load_checkpoint, save_checkpoint

SMALL = ["--set", "model.layers=1", "--set", "model.tokens=4", "--set", "model.dim=8", "--set", "model.heads=2",
         "--set", "train.history=2", "--set", "train.epochs=1", "--set", "train.batch_size=16",
         "--set", "train.val_every=0"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate", "--pde", "burgers", "--count", "4", "--test-count", "2", "--data-dir", str(d)]) == 0
    return d


def run(*argv):
    return main([str(a) for a in argv])


# -- config files -------------------------------------------------------------------------


def test_config_file_then_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\ntrain.epochs = 7   # trailing\n\nrun.seed = 3\ndata.datasets = a, b\n")
    s = cfgmod.load(f, ["train.epochs=9"])
    assert s["train"]["epochs"] == 9 and s["run"]["seed"] == 3 and s["data"]["datasets"] == ("a", "b")
    assert cfgmod.parse_text(cfgmod.dump(s)) == s


@pytest.mark.parametrize("text", ["train.epoch = 3", "nosection = 1", "train.epochs = three", "train.epochs"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        cfgmod.parse_text(text)


def test_unknown_key_exits_2(tmp_path, data_dir, capsys):
    code = run("pretrain", "--datasets", "burgers", "--data-dir", data_dir, "--output-dir", tmp_path,
               "--set", "train.epohcs=3")
    assert code == 2 and "unknown config key" in capsys.readouterr().err


# -- generate ------------------------------------------------------------------------------


def test_generate_shapes_and_checksum(tmp_path, capsys):
    assert run("generate", "--pde", "ns-1e5", "--scale", "paper", "--shape-only") == 0
    assert "[1200, 20, 1, 64, 64]" in capsys.readouterr().out
    assert run("generate", "--pde", "sw", "--scale", "desk", "--shape-only") == 0
    assert "[100, 20, 1, 32, 32]" in capsys.readouterr().out
    sums = []
    for _ in range(2):
        assert run("generate", "--pde", "burgers", "--count", "2", "--test-count", "1", "--data-dir", tmp_path) == 0
        out = capsys.readouterr().out
        sums.append(next(line for line in out.splitlines() if line.startswith("sha256")))
    assert sums[0] == sums[1]
    ds = read(tmp_path / "burgers" / "desk.lnopds")
    assert ds.values.shape == (2, 20, 1, 32, 32) and ds.name == "burgers"
    assert (tmp_path / "burgers" / "desk.lnopds.manifest.txt").exists()


def test_generate_unknown_preset_exits_2(tmp_path):
    assert run("generate", "--pde", "heat", "--data-dir", tmp_path) == 2


# -- runs -----------------------------------------------------------------------------------


def test_pretrain_finetune_evaluate(tmp_path, data_dir):
    common = ["--data-dir", data_dir, "--output-dir", tmp_path, *SMALL]
    assert run("pretrain", "--datasets", "burgers", "--model", "S", "--tag", "pre", *common) == 0
    pre = tmp_path / "pre"
    man = json.loads((pre / "manifest.json").read_text())
    assert man["status"] == "done"
    assert "train.epochs = 1" in man["config"]["run"]["settings"]
    assert "model.variant = S" in (pre / "config.txt").read_text()
    ck = load_checkpoint(pre / "final.lnop")
    assert ck.model.config.variant == "S" and ck.model.config.tokens == 4

    assert run("finetune", "--checkpoint", pre / "final.lnop", "--dataset", "burgers", "--freeze", "non-phca",
               "--tag", "ft", *common) == 0
    ft = load_checkpoint(tmp_path / "ft" / "final.lnop")
    assert ft.manifest["config"]["freeze"] == "non-phca"
    for n, t in ck.model.params.items():
        if n.startswith("phca."):
            assert np.array_equal(t.data, ft.model.params[n].data)

    assert run("evaluate", "--checkpoint", tmp_path / "ft" / "final.lnop", "--dataset", "burgers",
               "--tag", "ev", *common) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "burgers_eval.csv")))
    assert len(rows) == 2 and "relL2_f17" in rows[0]
    assert (tmp_path / "ev" / "report.csv").exists() and (tmp_path / "ev" / "manifest.json").exists()


def test_default_run_tag_is_stable(tmp_path, data_dir):
    common = ["pretrain", "--datasets", "burgers", "--data-dir", data_dir, "--output-dir", tmp_path, *SMALL]
    assert run(*common) == 0 and run(*common) == 0
    dirs = [p.name for p in tmp_path.iterdir()]
    assert len(dirs) == 1 and dirs[0].startswith("pretrain-")


def test_missing_files_exit_2(tmp_path, data_dir, capsys):
    assert run("evaluate", "--checkpoint", tmp_path / "none.lnop", "--dataset", "burgers",
               "--data-dir", data_dir, "--output-dir", tmp_path) == 2
    assert "not found" in capsys.readouterr().err
    assert run("pretrain", "--datasets", "sw", "--data-dir", data_dir, "--output-dir", tmp_path, *SMALL) == 2
    assert run("pretrain", "--config", tmp_path / "none.cfg", "--datasets", "burgers",
               "--data-dir", data_dir) == 2


def test_nan_exits_3(tmp_path, data_dir):
    model = LNOModel(LNOConfig(layers=1, tokens=4, dim=8, heads=2, history=2, channels=2))
    model.params["proj.out.2.bias"].data[...] = np.nan
    ck = save_checkpoint(tmp_path / "bad.lnop", model)
    code = run("finetune", "--checkpoint", ck, "--dataset", "burgers", "--data-dir", data_dir,
               "--output-dir", tmp_path, "--tag", "bad", *SMALL)
    assert code == 3
    assert "diverged at step 0" in (tmp_path / "bad" / "manifest.json").read_text()


def test_sweep_scaling_and_fraction(tmp_path, data_dir):
    common = ["--data-dir", data_dir, "--output-dir", tmp_path, *SMALL]
    assert run("sweep", "--axis", "token_count", "--datasets", "burgers", "--set", "eval.values=2,4",
               "--tag", "sc", *common) == 0
    rows = list(csv.DictReader(open(tmp_path / "sc" / "report.csv")))
    assert [r["token_count"] for r in rows] == ["2", "4"]

    model = LNOModel(LNOConfig(layers=1, tokens=4, dim=8, heads=2, history=2, channels=2))
    ck = save_checkpoint(tmp_path / "pre.lnop", model)
    assert run("sweep", "--axis", "fraction", "--checkpoint", ck, "--datasets", "burgers",
               "--set", "eval.fractions=0.5,1.0", "--tag", "fr", *common) == 0
    rows = list(csv.DictReader(open(tmp_path / "fr" / "report.csv")))
    assert [float(r["fraction"]) for r in rows] == [0.5, 1.0]
    assert run("sweep", "--axis", "fraction", "--datasets", "burgers", *common) == 2
