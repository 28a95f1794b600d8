"""Command line harness.

Every command writes CSV outputs plus ``manifest.json`` (resolved config,
command options, output checksums).  ``distgdm replay MANIFEST`` re-runs the
recorded command and checks the outputs byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import sys
import tempfile
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import config as C
from . import nn_core as nn
from .channel import bep as bep_fn, calibrate_n0
from .errors import ConfigError, DistGDMError
from .experiments import (bep_sweep, best_t0, infer_report, run_training, sample_diffusion,
                          steps_sweep)
from .rl import Agent, init_agent

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def write_csv(path: Path, rows: list, fields=None) -> Path:
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, options: dict, cfg: C.ExperimentConfig, outputs):
    manifest = {
        "command": command,
        "options": options,
        "seed": cfg.seed,
        "version": __version__,
        "config": cfg.model_dump(mode="json"),
        "outputs": {Path(p).name: sha256(p) for p in sorted(outputs, key=lambda p: Path(p).name)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# command bodies: (cfg, out_dir, **options) -> list of output paths ----------

def do_sweep_bep(cfg, out, **_):
    rows = bep_sweep(cfg)
    return [write_csv(out / "bep_sweep.csv", rows)]


def do_sweep_steps(cfg, out, **_):
    rows = steps_sweep(cfg)
    t2 = max(cfg.sweep_steps.t2_values)
    for name in sorted({r["persona"] for r in rows}):
        click.echo(f"{name}: best t0 at t2={t2} is {best_t0(rows, t2, name)}")
    return [write_csv(out / "steps_sweep.csv", rows)]


def _save_agent(out: Path, tag: str, agent: Agent) -> list:
    a = out / f"actor_{tag}.nnck"
    c = out / f"critic_{tag}.nnck"
    nn.save_checkpoint(agent.actor, a)
    nn.save_checkpoint(agent.critic, c)
    return [a, c]


def do_train(cfg, out, algo="gddpg", seeds=1, episodes=None, **_):
    algos = ["ddpg", "gddpg"] if algo == "both" else [algo]
    outputs, summary = [], []
    for a in algos:
        for s in range(seeds):
            seed = cfg.seed + s
            res = run_training(cfg, a, seed, episodes)
            tag = f"{a}_seed{seed}"
            outputs.append(write_csv(out / f"trace_{tag}.csv", res.trace))
            outputs += _save_agent(out, tag, res.agent)
            summary.append({"algo": a, "seed": seed, "final_eval_reward": res.final_eval})
            click.echo(f"{a} seed {seed}: final eval reward {res.final_eval:.4f}")
    if algo == "both":
        means = {a: sum(r["final_eval_reward"] for r in summary if r["algo"] == a) / seeds
                 for a in algos}
        gap = 100.0 * (means["gddpg"] - means["ddpg"]) / abs(means["ddpg"])
        summary.append({"algo": "gap_percent", "seed": -1, "final_eval_reward": gap})
        click.echo(f"G-DDPG vs DDPG mean final eval reward gap: {gap:+.2f}%")
    outputs.append(write_csv(out / "train_summary.csv", summary))
    return outputs


def do_infer(cfg, out, algo="gddpg", checkpoint=None, state_seed=0, **_):
    if checkpoint is None:
        raise ConfigError("infer needs --checkpoint")
    env = C.build_env(cfg)
    agent = init_agent(algo, env, C.build_trainer(cfg), np.random.default_rng(0))
    try:
        actor = nn.load_checkpoint(checkpoint)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {checkpoint}: {exc}") from exc
    if [w.shape for w in actor.weights] != [w.shape for w in agent.actor.weights]:
        raise ConfigError("checkpoint shapes do not match the configured actor")
    agent.actor = actor
    rep = infer_report(cfg, agent, state_seed)
    for k in ("prompts", "t0", "tk", "power_dbw", "bep", "qoe", "reward"):
        click.echo(f"{k}: {rep[k]}")
    rows = [{"device": k + 1, "prompt": rep["prompts"][k], "gain": rep["gains"][k],
             "t0": rep["t0"], "tk": rep["tk"][k], "power_dbw": rep["power_dbw"][k],
             "bep": rep["bep"][k], "qoe": rep["qoe"][k], "reward": rep["reward"]}
            for k in range(len(rep["qoe"]))]
    return [write_csv(out / "infer_report.csv", rows)]


def do_calibrate_noise(cfg, out, power=18.0, target_bep=0.05, **_):
    try:
        n0 = calibrate_n0(power, target_bep)
    except DistGDMError as exc:
        raise ConfigError(str(exc)) from exc
    derived = cfg.model_copy(deep=True)
    derived.channel.N0 = n0
    check = bep_fn(power, 1.0, C.build_budget(derived))
    click.echo(f"N0 = {n0!r} (BEP at {power} dBW, unit gain: {check!r})")
    path = out / "calibrated_config.yaml"
    path.write_text(C.dump_config(derived))
    rows = [{"power_dbw": float(power), "target_bep": float(target_bep), "N0": n0,
             "achieved_bep": check}]
    return [path, write_csv(out / "calibration.csv", rows)]


def do_sample_diffusion(cfg, out, **_):
    traj, kl = sample_diffusion(cfg)
    return [write_csv(out / "trajectories.csv", traj), write_csv(out / "path_kl.csv", kl)]


COMMANDS = {
    "sweep-bep": do_sweep_bep,
    "sweep-steps": do_sweep_steps,
    "train": do_train,
    "infer": do_infer,
    "calibrate-noise": do_calibrate_noise,
    "sample-diffusion": do_sample_diffusion,
}


def execute(command: str, cfg: C.ExperimentConfig, out: Path, options: dict) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(C.dump_config(cfg))
    outputs = COMMANDS[command](cfg, out, **options)
    return write_manifest(out, command, options, cfg, outputs)


def _resolve(config_path, seed, deterministic, out):
    cfg = C.load_config(config_path)
    if seed is not None:
        cfg.seed = seed
    if deterministic:
        cfg.deterministic = True
    out_dir = Path(out) if out else Path(cfg.output_dir)
    return cfg, out_dir


def _guard(fn):
    """Map errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except (DistGDMError, OSError, ArithmeticError, ValueError) as exc:
            click.echo(f"runtime error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
    return wrapper


def common(fn):
    fn = click.option("--deterministic", is_flag=True, help="Zero reverse noise and QoE jitter.")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (default: config output_dir).")(fn)
    fn = click.option("--seed", type=int, default=None, help="Root seed override.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="YAML experiment config.")(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Split-inference diffusion simulator and resource-allocation trainer."""


def _simple(name, help_text):
    @main.command(name, help=help_text)
    @common
    @_guard
    def cmd(config_path, seed, out, deterministic):
        cfg, out_dir = _resolve(config_path, seed, deterministic, out)
        execute(name, cfg, out_dir, {})
    return cmd


_simple("sweep-bep", "QoE versus bit error probability at fixed step counts.")
_simple("sweep-steps", "Persona QoE over server and device step counts at fixed BEP.")
_simple("sample-diffusion", "Dump oracle reverse-chain trajectories and the path KL table.")


@main.command("train", help="Train DDPG, G-DDPG, or both (paired comparison).")
@common
@click.option("--algo", type=click.Choice(["ddpg", "gddpg", "both"]), default="gddpg")
@click.option("--seeds", type=int, default=1, help="Number of consecutive seeds.")
@click.option("--episodes", type=int, default=None, help="Override the configured episodes.")
@_guard
def train_cmd(config_path, seed, out, deterministic, algo, seeds, episodes):
    cfg, out_dir = _resolve(config_path, seed, deterministic, out)
    execute("train", cfg, out_dir, {"algo": algo, "seeds": seeds, "episodes": episodes})


@main.command("infer", help="Run a trained actor on a sampled state and report the allocation.")
@common
@click.option("--algo", type=click.Choice(["ddpg", "gddpg"]), default="gddpg")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--state-seed", type=int, default=0)
@_guard
def infer_cmd(config_path, seed, out, deterministic, algo, checkpoint, state_seed):
    cfg, out_dir = _resolve(config_path, seed, deterministic, out)
    execute("infer", cfg, out_dir, {"algo": algo, "checkpoint": str(Path(checkpoint).resolve()),
                                    "state_seed": state_seed})


@main.command("calibrate-noise", help="Solve for N0 so that a power level yields a target BEP.")
@common
@click.option("--power", type=float, default=18.0, help="Transmit power in dBW.")
@click.option("--bep", "target_bep", type=float, default=0.05, help="Target bit error probability.")
@_guard
def calibrate_cmd(config_path, seed, out, deterministic, power, target_bep):
    cfg, out_dir = _resolve(config_path, seed, deterministic, out)
    execute("calibrate-noise", cfg, out_dir, {"power": power, "target_bep": target_bep})


@main.command("replay", help="Re-run a manifest and verify its outputs byte for byte.")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@_guard
def replay_cmd(manifest, out):
    rec = json.loads(Path(manifest).read_text())
    cfg = C.load_config(rec["config"])
    out_dir = Path(out) if out else Path(tempfile.mkdtemp(prefix="replay-"))
    new = execute(rec["command"], cfg, out_dir, rec["options"])
    bad = [k for k, v in rec["outputs"].items() if new["outputs"].get(k) != v]
    if bad:
        click.echo(f"mismatch in: {', '.join(bad)}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"replay identical: {len(rec['outputs'])} outputs in {out_dir}")


if __name__ == "__main__":
    main()
