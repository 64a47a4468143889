import json

import numpy as np
import pytest

from cyclevos import cli
from cyclevos.data import read_label_map, suite_checksum
from cyclevos.segnet import load_checkpoint

TINY = [
    "--n-train", "2", "--n-val", "1", "--n-eval", "1", "--size", "16", "--length", "8",
    "--radius", "3,4", "--velocity", "0.5,1", "--feat-channels", "4", "--key-channels", "2", "--value-channels", "4",
]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--seed", 7, "--out", root / "suite", *TINY) == 0
    assert run("train", "--suite-dir", root / "suite", "--out", root / "train", "--epochs", 2, *TINY) == 0
    return root


def test_synth_twice_identical_checksum(workspace, tmp_path):
    assert run("synth", "--seed", 7, "--out", tmp_path / "again", *TINY) == 0
    assert suite_checksum(tmp_path / "again") == suite_checksum(workspace / "suite")
    assert run("synth", "--seed", 8, "--out", tmp_path / "other", *TINY) == 0
    assert suite_checksum(tmp_path / "other") != suite_checksum(workspace / "suite")


def test_train_outputs(workspace):
    d = workspace / "train"
    for name in ("model.cvos", "losses.csv", "losses.png", "run.json"):
        assert (d / name).is_file()
    rec = json.loads((d / "run.json").read_text())
    assert rec["command"] == "train" and rec["config"]["epochs"] == 2 and rec["config"]["seed"] == 0


def _masks(d):
    return {p.relative_to(d).as_posix(): read_label_map(p).tobytes() for p in sorted(d.rglob("*.png"))}


def test_correction_off_equals_alpha_zero(workspace, tmp_path):
    common = ["--suite-dir", workspace / "suite", "--checkpoint", workspace / "train" / "model.cvos", "--strategy", "first"]
    assert run("infer", *common, "--out", tmp_path / "off", "--correction", "off") == 0
    assert run("infer", *common, "--out", tmp_path / "on", "--correction", "on", "--alpha", 0) == 0
    off, on = _masks(tmp_path / "off"), _masks(tmp_path / "on")
    assert off and off == on
    timing = json.loads((tmp_path / "on" / "timing.json").read_text())
    assert timing["correction"] is True and timing["fps_corrected"] > 0 and timing["fps_uncorrected"] > 0


def test_infer_eval_erf_outputs(workspace, tmp_path):
    ckpt = workspace / "train" / "model.cvos"
    assert run("infer", "--suite-dir", workspace / "suite", "--checkpoint", ckpt, "--out", tmp_path / "inf",
               "--soft-masks", "on", "--correction", "on", "--alpha", 50, "--iters-n", 2) == 0
    assert list((tmp_path / "inf").rglob("*.pgm"))
    assert run("eval", "--suite-dir", workspace / "suite", "--pred-dir", tmp_path / "inf", "--out", tmp_path / "ev") == 0
    rep = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert 0 <= rep["JF"] <= 1 and rep["fps"] > 0
    assert run("erf", "--suite-dir", workspace / "suite", "--checkpoint", ckpt, "--out", tmp_path / "erf",
               "--erf-m", 2, "--erf-reference", 4) == 0
    assert (tmp_path / "erf" / "erf.png").is_file() and list((tmp_path / "erf").glob("*.f32"))


def test_rerun_from_run_json_is_bit_identical(workspace, tmp_path):
    rec = workspace / "train" / "run.json"
    assert run("train", "--config", rec, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "model.cvos").read_bytes() == (workspace / "train" / "model.cvos").read_bytes()
    assert (tmp_path / "again" / "losses.csv").read_bytes() == (workspace / "train" / "losses.csv").read_bytes()
    # only the output path differs between the two records
    a = json.loads(rec.read_text())["config"]
    b = json.loads((tmp_path / "again" / "run.json").read_text())["config"]
    assert {k for k in a if a[k] != b[k]} == {"out"}


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# comment\nepochs = 7\niters-n = 3\ndetach_cycle = on\nseeds = 4, 5\n")
    file_cfg = cli.read_config(conf)
    c = cli.resolve("train", file_cfg, {"epochs": "9"})
    assert c["epochs"] == 9 and c["iters_n"] == 3 and c["detach_cycle"] is True and c["seeds"] == [4, 5]
    assert cli.resolve("ablate", {}, {})["batch_size"] == 1
    assert cli.resolve("train", {}, {})["batch_size"] == 2


def test_unknown_config_key_is_hard_error(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("epochz = 3\n")
    assert run("train", "--config", conf, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "unknown config key 'epochz'" in err[0]
    with pytest.raises(SystemExit) as exc:
        run("train", "--epochz", 3)
    assert exc.value.code != 0


@pytest.mark.parametrize(
    "args, cause",
    [
        (["--strategy", "last"], "bad value for strategy"),
        (["--epochs", "1.5"], "bad value for epochs"),
        (["--correction", "maybe"], "bad value for correction"),
        (["--radius", "3"], "radius needs two values"),
    ],
)
def test_bad_values_exit_nonzero(tmp_path, capsys, args, cause):
    assert run("synth", "--out", tmp_path / "o", *args) == 2
    assert cause in capsys.readouterr().err


def test_missing_paths_flag_partial_output(tmp_path, capsys):
    assert run("infer", "--out", tmp_path / "inf", "--checkpoint", tmp_path / "none.cvos") == 2
    assert "checkpoint not found" in capsys.readouterr().err
    assert (tmp_path / "inf" / "INCOMPLETE").is_file()
    assert run("infer", "--out", tmp_path / "x") == 2
    assert "--checkpoint is required" in capsys.readouterr().err
    assert run("synth") == 2


def test_ablate_tables(tmp_path):
    args = ["ablate", "--out", tmp_path / "ab", *TINY, "--length", 10, "--epochs", 1, "--seeds", "0,1",
            "--alpha-grid", "1,100", "--timing-iters", "1,2,3", "--timing-repeats", 1, "--erf-m", 2]
    assert run(*args) == 0
    out = tmp_path / "ab"
    res = json.loads((out / "results.json").read_text())
    variants = [r["variant"] for r in res["component"]]
    assert sorted(set(variants)) == sorted(["baseline", "+cyclic", "+GC", "+both"]) and len(variants) == 8
    assert {r["strategy"] for r in res["strategy"]} == {"first", "prev", "first+prev", "mem"}
    assert len(res["degradation"]) == 2 * 3 * 2
    assert [r["alpha"] for r in res["alpha_sweep"]] == [0.0, 1.0, 100.0]
    for name in ("summary.md", "component.csv", "component.png", "strategy.png", "degradation.png", "timing.png",
                 "alpha_sweep.png", "losses.png"):
        assert (out / name).is_file(), name
    md = (out / "summary.md").read_text()
    assert "| baseline |" in md and "| +both |" in md
    # cached runs are reused on a second invocation
    first = {p: p.read_bytes() for p in (out / "runs").rglob("model.cvos")}
    assert run(*args) == 0
    assert {p: p.read_bytes() for p in (out / "runs").rglob("model.cvos")} == first
    assert load_checkpoint(out / "runs" / "cyclic-1" / "model.cvos")[0].feat_channels == 4


def test_threads_env_applied_before_numpy(tmp_path):
    import subprocess
    import sys

    code = "import os, cyclevos; print(os.environ.get('OPENBLAS_NUM_THREADS'))"
    env = {"CYCLEVOS_THREADS": "1", "PATH": "/usr/bin:/bin"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "1"
    assert np.__name__ == "numpy"
