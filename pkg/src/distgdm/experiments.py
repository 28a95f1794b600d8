"""Experiment drivers shared by the command line and the acceptance tests."""
from __future__ import annotations

import numpy as np

from . import config as C
from .agents import evaluate
from .channel import FixedBepChannel, FixedPointCodec
from .diffusion import OracleDenoiser, sample_chain
from .distributed import InferencePlan, run_distributed
from .rl import (EnvConfig, TrainResult, agent_act, decode_action, env_reset, env_step,
                 state_features, train)
from .rng import child_seed, substream
from .semantics import path_kl


def bep_sweep(cfg: C.ExperimentConfig, grid=None, seeds=None) -> list:
    """Mean/std QoE of one device versus channel BEP at fixed step counts."""
    b = cfg.sweep_bep
    grid = b.grid if grid is None else grid
    seeds = b.seeds if seeds is None else seeds
    world = C.build_world(cfg)
    sched = C.build_schedule(cfg.inference_schedule)
    den = OracleDenoiser(world)
    persona = C.build_personas(cfg)[b.persona]
    weights = C.build_weights(cfg)
    codec = FixedPointCodec(cfg.channel.R)
    rows = []
    for p in grid:
        chan = FixedBepChannel((p,), codec)
        q = []
        for s in range(seeds):
            run_seed = child_seed(cfg.seed, "bep-sweep", s)
            plan = InferencePlan.compact(b.prompt, (b.prompt,), b.t0, (b.t1,), (0.0,),
                                         cfg.deterministic, run_seed)
            out = run_distributed(world, sched, den, plan, chan)
            binding = C.build_binding(cfg, child_seed(run_seed, "qoe"))
            q.append(evaluate(world, persona, b.prompt, b.prompt, out.final[0], binding, weights,
                              ambient=out.ambient[0]).qoe)
        rows.append({"bep": float(p), "mean_qoe": float(np.mean(q)),
                     "std_qoe": float(np.std(q)), "seeds": seeds})
    return rows


def steps_sweep(cfg: C.ExperimentConfig, t0_values=None, t2_values=None, seeds=None) -> list:
    """QoE of device 2 over (t0, t2) at a fixed BEP, for each configured persona.

    Device 1 holds the anchor prompt; device 2 holds ``device_prompt``.  Both
    devices take t2 steps so the plan length is t0 + t2.
    """
    b = cfg.sweep_steps
    t0_values = b.t0_values if t0_values is None else t0_values
    t2_values = b.t2_values if t2_values is None else t2_values
    seeds = b.seeds if seeds is None else seeds
    world = C.build_world(cfg)
    sched = C.build_schedule(cfg.inference_schedule)
    den = OracleDenoiser(world)
    personas = C.build_personas(cfg)
    weights = C.build_weights(cfg)
    chan = FixedBepChannel((b.bep, b.bep), FixedPointCodec(cfg.channel.R))
    anchor_emb = world.get(b.anchor).embedding
    rows = []
    for t2 in t2_values:
        for t0 in t0_values:
            q = {i: [] for i in b.personas}
            cont = []
            for s in range(seeds):
                run_seed = child_seed(cfg.seed, "steps-sweep", s)
                plan = InferencePlan.compact(b.anchor, (b.anchor, b.device_prompt), t0, (t2, t2),
                                             (0.0, 0.0), cfg.deterministic, run_seed)
                out = run_distributed(world, sched, den, plan, chan)
                z = out.final[1]
                cont.append(float(np.linalg.norm(z - anchor_emb)))
                for i in b.personas:
                    binding = C.build_binding(cfg, child_seed(run_seed, "qoe", i))
                    q[i].append(evaluate(world, personas[i], b.device_prompt, b.anchor, z,
                                         binding, weights, ambient=out.ambient[1]).qoe)
            for i in b.personas:
                name = cfg.agents.personas[i].name or f"persona{i}"
                rows.append({"t0": t0, "t2": t2, "persona": name,
                             "mean_qoe": float(np.mean(q[i])), "std_qoe": float(np.std(q[i])),
                             "anchor_distance": float(np.mean(cont)), "seeds": seeds})
    return rows


def best_t0(rows, t2: int, persona: str) -> int:
    cells = [r for r in rows if r["t2"] == t2 and r["persona"] == persona]
    return max(cells, key=lambda r: (r["mean_qoe"], -r["t0"]))["t0"]


def run_training(cfg: C.ExperimentConfig, algo: str, seed: int | None = None,
                 episodes: int | None = None, progress=None) -> TrainResult:
    env = C.build_env(cfg)
    tcfg = C.build_trainer(cfg, seed)
    if episodes is not None:
        tcfg.episodes = episodes
    return train(algo, env, tcfg, progress)


def sample_diffusion(cfg: C.ExperimentConfig):
    """Reverse-chain trajectories per prompt, plus the path KL table."""
    world = C.build_world(cfg)
    sched = C.build_schedule(cfg.schedule)
    den = OracleDenoiser(world)
    traj = []
    for pid in cfg.sample.prompts:
        rng = substream(cfg.seed, "sample", pid)
        _, path = sample_chain(world, sched, den, pid, cfg.sample.chains, rng,
                               cfg.deterministic, record=True)
        for i, z in enumerate(path):
            t = sched.T - i
            for c in range(cfg.sample.chains):
                row = {"prompt": pid, "chain": c, "t": t}
                row.update({f"z{j}": float(z[c, j]) for j in range(world.d)})
                traj.append(row)
    kl = []
    ps = cfg.sample.prompts
    for a in range(len(ps)):
        for b in range(a + 1, len(ps)):
            for t in range(sched.T + 1):
                kl.append({"prompt_i": ps[a], "prompt_j": ps[b], "t": t,
                           "kl": path_kl(world, sched, ps[a], ps[b], t)})
    return traj, kl


def infer_report(cfg: C.ExperimentConfig, agent, state_seed: int = 0) -> dict:
    env: EnvConfig = C.build_env(cfg)
    state = env_reset(env, substream(state_seed, "infer-state"))
    feats = state_features(state.vector, env)[0]
    raw = agent_act(agent, feats, substream(state_seed, "infer-act"), deterministic=True)
    res = env_step(state, raw, env, child_seed(state_seed, "infer-step"))
    p, t0, tk = decode_action(raw, env)
    return {"prompts": list(state.prompts), "gains": state.gains.tolist(), "t0": t0,
            "tk": list(tk), "power_dbw": p.tolist(), "bep": res.bep.tolist(),
            "qoe": res.qoe.tolist(), "penalties": res.penalties.tolist(), "reward": res.reward}
