import csv
import json

import pytest
import yaml
from click.testing import CliRunner

from distgdm import config as C
from distgdm.cli import main

SMALL = {
    "sweep_bep": {"grid": [0.005, 0.15], "seeds": 3},
    "sweep_steps": {"t2_values": [8], "seeds": 3},
    "sample": {"chains": 2},
    "rl": {"trainer": {"episodes": 20, "batch_size": 8, "hidden": 8, "eval_every": 10, "eval_states": 2}},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("command,files", [
    ("sweep-bep", ["bep_sweep.csv"]),
    ("sweep-steps", ["steps_sweep.csv"]),
    ("sample-diffusion", ["trajectories.csv", "path_kl.csv"]),
])
def test_command_writes_outputs_and_replays(tmp_path, small_config, command, files):
    out = tmp_path / "out"
    res = run(command, "--config", small_config, "--out", out, "--seed", 5)
    assert res.exit_code == 0, res.output
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == command and manifest["seed"] == 5
    assert sorted(manifest["outputs"]) == sorted(files)
    assert set(manifest) == {"command", "options", "seed", "version", "config", "outputs"}
    for f in files:
        assert read_csv(out / f)
    again = run("replay", out / "manifest.json", "--out", tmp_path / "replayed")
    assert again.exit_code == 0, again.output
    for f in files:
        assert (out / f).read_bytes() == (tmp_path / "replayed" / f).read_bytes()


def test_replay_detects_tampering(tmp_path, small_config):
    out = tmp_path / "out"
    assert run("sample-diffusion", "--config", small_config, "--out", out).exit_code == 0
    m = json.loads((out / "manifest.json").read_text())
    m["outputs"]["path_kl.csv"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(m))
    assert run("replay", out / "manifest.json", "--out", tmp_path / "r").exit_code == 3


def test_train_both_then_infer(tmp_path, small_config):
    out = tmp_path / "train"
    res = run("train", "--config", small_config, "--out", out, "--algo", "both", "--deterministic")
    assert res.exit_code == 0, res.output
    summary = read_csv(out / "train_summary.csv")
    assert [r["algo"] for r in summary] == ["ddpg", "gddpg", "gap_percent"]
    trace = read_csv(out / "trace_gddpg_seed0.csv")
    assert len(trace) == 20 and set(trace[0]) >= {"iteration", "train_reward", "eval_reward"}
    assert run("replay", out / "manifest.json", "--out", tmp_path / "again").exit_code == 0

    inf = tmp_path / "infer"
    res = run("infer", "--config", small_config, "--out", inf, "--deterministic",
              "--checkpoint", out / "actor_gddpg_seed0.nnck")
    assert res.exit_code == 0, res.output
    assert len(read_csv(inf / "infer_report.csv")) == 3


def test_infer_rejects_mismatched_checkpoint(tmp_path, small_config):
    out = tmp_path / "train"
    assert run("train", "--config", small_config, "--out", out, "--algo", "ddpg").exit_code == 0
    res = run("infer", "--config", small_config, "--out", tmp_path / "i", "--algo", "gddpg",
              "--checkpoint", out / "actor_ddpg_seed0.nnck")
    assert res.exit_code == 2


def test_calibrate_noise_writes_loadable_config(tmp_path):
    out = tmp_path / "cal"
    res = run("calibrate-noise", "--out", out, "--power", 21, "--bep", 0.01)
    assert res.exit_code == 0, res.output
    cfg = C.load_config(out / "calibrated_config.yaml")
    row = read_csv(out / "calibration.csv")[0]
    assert cfg.channel.N0 == pytest.approx(float(row["N0"]))
    assert float(row["achieved_bep"]) == pytest.approx(0.01)


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("world: {d: 0}\n")
    res = run("sweep-bep", "--config", bad, "--out", tmp_path / "x")
    assert res.exit_code == 2
    assert "world.d" in res.output
    assert run("calibrate-noise", "--out", tmp_path / "y", "--bep", 0.9).exit_code == 2
