"""Resource-allocation environment and the two actor-critic trainers.

Each episode is a single decision: observe a state (personas, prompts, energy
costs, channel gains, QoE threshold), choose powers and step counts, run the
split inference, and collect the summed persona QoE minus constraint
penalties as the reward.  ``ddpg_train`` uses an MLP actor; ``gddpg_train``
uses a small conditional diffusion model over the action cube as the actor and
backpropagates the critic through its whole denoising chain.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_core as nn
from .agents import DEFAULT_PERSONAS, EvaluatorBinding, Persona, QoEWeights, evaluate
from .channel import FadingParams, FixedPointCodec, LinkBudget, WirelessChannel, sample_gain
from .diffusion import NoiseSchedule, OracleDenoiser, build_schedule, time_embedding
from .distributed import EnergyModel, InferencePlan, check_constraints, run_distributed
from .errors import ConfigError, TrainingError
from .rng import child_seed, substream
from .semantics import PromptWorld, default_world

# base schedule used by split inference in the experiments (partially noised,
# so a handoff still carries prompt information)
INFERENCE_BETA = (1e-4, 0.02)


@dataclass
class EnvConfig:
    world: PromptWorld = field(default_factory=default_world)
    schedule: NoiseSchedule = field(default_factory=lambda: build_schedule(50, *INFERENCE_BETA))
    personas: tuple = DEFAULT_PERSONAS
    energy: EnergyModel = field(default_factory=EnergyModel)
    q_threshold: float = 0.6
    lambdas: tuple = (1.0, 1.0, 1.0)
    T_s: int = 8
    T_e: int = 8
    budget: LinkBudget = field(default_factory=LinkBudget)
    fading: FadingParams = field(default_factory=FadingParams)
    codec: FixedPointCodec = field(default_factory=FixedPointCodec)
    weights: QoEWeights = field(default_factory=QoEWeights)
    deterministic: bool = False
    prompt_pool: tuple | None = None     # ids users may draw; default: whole vocabulary
    fixed_prompts: tuple | None = None   # pin the users' prompts
    fixed_gains: tuple | None = None     # pin the channel gains
    fixed_seed: int | None = None        # pin the per-step randomness (deterministic stack)

    def __post_init__(self):
        self.personas = tuple(self.personas)
        K = len(self.personas)
        if K < 1:
            raise ConfigError("need at least one persona")
        if self.energy.K != K:
            raise ConfigError(f"energy model has {self.energy.K} devices, personas define {K}")
        if self.T_s < 1 or self.T_e < 1:
            raise ConfigError("T_s and T_e must be positive")
        if self.T_s + self.T_e > self.schedule.T:
            raise ConfigError("T_s + T_e exceeds the base schedule length")
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ConfigError("need three non-negative penalty weights")
        if len(self.world) == 0:
            raise ConfigError("empty prompt vocabulary")
        for name in ("fixed_prompts", "fixed_gains"):
            v = getattr(self, name)
            if v is not None and len(v) != K:
                raise ConfigError(f"{name} must have {K} entries")

    @property
    def K(self) -> int:
        return len(self.personas)

    @property
    def action_dim(self) -> int:
        return self.K + self.T_s + self.K * self.T_e

    @property
    def state_dim(self) -> int:
        K, d = self.K, self.world.d
        return 5 * K + K * d + (K + 1) + K + 1


@dataclass
class EnvState:
    personas: np.ndarray     # (K, 5)
    prompts: tuple           # prompt ids; prompts[0] is the anchor
    embeddings: np.ndarray   # (K, d)
    deltas: np.ndarray       # (K + 1,)
    gains: np.ndarray        # (K,)
    q_threshold: float

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.personas.ravel(), self.embeddings.ravel(), self.deltas,
                               self.gains, [self.q_threshold]])


def env_reset(config: EnvConfig, rng) -> EnvState:
    world = config.world
    pool = list(config.prompt_pool) if config.prompt_pool else world.ids
    if not pool:
        raise ConfigError("empty prompt vocabulary")
    if config.fixed_prompts is not None:
        prompts = tuple(config.fixed_prompts)
    else:
        prompts = tuple(pool[i] for i in rng.integers(len(pool), size=config.K))
    if config.fixed_gains is not None:
        gains = np.asarray(config.fixed_gains, dtype=np.float64)
    else:
        gains = sample_gain(config.fading, rng, config.K)
    return EnvState(
        personas=np.stack([p.vector() for p in config.personas]),
        prompts=prompts,
        embeddings=np.stack([world.get(p).embedding for p in prompts]),
        deltas=np.array((config.energy.delta_0,) + config.energy.delta_k),
        gains=np.asarray(gains, dtype=np.float64),
        q_threshold=float(config.q_threshold),
    )


def decode_action(raw, config: EnvConfig):
    """Raw vector in [0,1]^A -> (powers dBW, t0, t_k tuple)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (config.action_dim,):
        raise ConfigError(f"action must have {config.action_dim} entries")
    K, Ts, Te = config.K, config.T_s, config.T_e
    b = config.budget
    p = b.p_min_dbw + np.clip(raw[:K], 0.0, 1.0) * (b.p_max_dbw - b.p_min_dbw)
    t0 = int(np.argmax(raw[K:K + Ts])) + 1
    blocks = raw[K + Ts:].reshape(K, Te)
    tk = tuple(int(np.argmax(row)) + 1 for row in blocks)
    return p, t0, tk


def encode_action(config: EnvConfig, power_levels01, t0: int, tk) -> np.ndarray:
    """Inverse of decode_action for grid search: one-hot step blocks."""
    raw = np.zeros(config.action_dim)
    raw[:config.K] = power_levels01
    raw[config.K + t0 - 1] = 1.0
    for k, t in enumerate(tk):
        raw[config.K + config.T_s + k * config.T_e + t - 1] = 1.0
    return raw


@dataclass
class StepResult:
    reward: float
    qoe: np.ndarray
    penalties: np.ndarray    # (3,) weighted: device budget, QoE threshold, server budget
    powers_dbw: np.ndarray
    t0: int
    tk: tuple
    bep: np.ndarray
    plan: InferencePlan

    @property
    def sum_qoe(self) -> float:
        return float(self.qoe.sum())


def env_step(state: EnvState, action, config: EnvConfig, seed: int = 0,
             denoiser=None) -> StepResult:
    """Run one split inference for ``action`` and score it."""
    seed = config.fixed_seed if config.fixed_seed is not None else seed
    p_dbw, t0, tk = decode_action(action, config)
    plan = InferencePlan.compact(state.prompts[0], state.prompts, t0, tk, p_dbw,
                                 config.deterministic, seed)
    chan = WirelessChannel(state.gains, config.budget, config.codec)
    den = denoiser or OracleDenoiser(config.world)
    out = run_distributed(config.world, config.schedule, den, plan, chan, energy=config.energy)
    qoe = np.zeros(config.K)
    for k, persona in enumerate(config.personas):
        binding = EvaluatorBinding(deterministic=config.deterministic,
                                   seed=child_seed(seed, "qoe", k))
        qoe[k] = evaluate(config.world, persona, state.prompts[k], state.prompts[0],
                          out.final[k], binding, config.weights).qoe
    viol = check_constraints(plan, config.energy, qoe, config.q_threshold)
    l1, l2, l3 = config.lambdas
    pen = np.array([l1 * viol.device_budget.sum(), l2 * viol.qoe.sum(), l3 * viol.server_budget])
    return StepResult(float(qoe.sum() - pen.sum()), qoe, pen, p_dbw, t0, tk, out.bep, plan)


def state_features(vectors, config: EnvConfig) -> np.ndarray:
    """Network input: the state vector with gains on a log scale."""
    x = np.array(vectors, dtype=np.float64, ndmin=2)
    K, d = config.K, config.world.d
    g0 = 5 * K + K * d + K + 1
    x[:, g0:g0 + K] = np.clip(np.log(np.maximum(x[:, g0:g0 + K], 1e-12)), -5.0, 5.0)
    return x


# replay buffer ------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform minibatch sampling."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def add(self, tr: Transition):
        self.items.append(tr)

    def sample(self, n: int, rng):
        idx = rng.choice(len(self.items), size=min(n, len(self.items)), replace=False)
        batch = [self.items[i] for i in idx]
        return (np.stack([b.state for b in batch]), np.stack([b.action for b in batch]),
                np.array([b.reward for b in batch]))


# trainers -----------------------------------------------------------------

@dataclass
class TrainerConfig:
    episodes: int = 2000
    batch_size: int = 64
    tau: float = 0.005
    sigma_explore: float = 0.1
    sigma_final: float = 0.01
    diffusion_steps: int = 5
    actor_beta: tuple = (0.05, 0.5)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    optimizer: str = "sgd"
    hidden: int = 128
    buffer_capacity: int = 100_000
    eval_every: int = 100
    eval_states: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")
        for name in ("episodes", "batch_size", "diffusion_steps", "hidden", "eval_every",
                     "eval_states"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if min(self.actor_lr, self.critic_lr, self.sigma_explore) < 0 or self.sigma_final < 0:
            raise ConfigError("learning rates and noise scales must be non-negative")


@dataclass
class Agent:
    """Actor/critic parameters with their target copies."""

    algo: str
    actor: nn.MlpParams
    critic: nn.MlpParams
    actor_target: nn.MlpParams
    critic_target: nn.MlpParams
    actor_schedule: NoiseSchedule | None = None


def init_critic(S: int, A: int, hidden: int, rng) -> nn.MlpParams:
    return nn.init_mlp([S + A, hidden, hidden, 1], ["relu", "relu", "identity"], rng, 0.1)


def init_ddpg_actor(S: int, A: int, hidden: int, rng) -> nn.MlpParams:
    return nn.init_mlp([S, hidden, hidden, A], ["relu", "relu", "identity"], rng, 0.1)


def init_gddpg_actor(S: int, A: int, hidden: int, rng) -> nn.MlpParams:
    return nn.init_mlp([A + 3 + S, hidden, hidden, A], ["tanh", "tanh", "identity"], rng, 0.1)


def ddpg_actor_graph(g: nn.Graph, params: nn.MlpParams, s: nn.Tensor) -> nn.Tensor:
    """MLP actor squashed into [0, 1] by 0.5 * (tanh(x) + 1)."""
    h = nn.mlp_apply(g, params, s)
    return g.add_const(g.scale(g.tanh(h), 0.5), 0.5)


def gddpg_actor_graph(g: nn.Graph, params: nn.MlpParams, s: nn.Tensor, sched: NoiseSchedule,
                      init_noise: np.ndarray, step_noise: np.ndarray | None) -> nn.Tensor:
    """Record the D-step conditional denoising chain; returns the squashed action.

    ``step_noise`` has shape (D, B, A) (ignored entries when deterministic) or
    is None for the deterministic chain.
    """
    B = s.shape[0]
    a = g.const(init_noise)
    for t in range(sched.T, 0, -1):
        emb = g.const(np.broadcast_to(time_embedding(t, sched.T), (B, 3)))
        eps = nn.mlp_apply(g, params, g.concat([a, emb, s]))
        a_ts, s_ts = sched.transition(t, t - 1)
        sig_t, sig_s = sched.sigma[t], sched.sigma[t - 1]
        a = g.add(g.scale(a, 1.0 / a_ts), g.scale(eps, -(s_ts ** 2) / (sig_t * a_ts)))
        std = s_ts * sig_s / sig_t
        if step_noise is not None and std > 0:
            a = g.add(a, g.const(std * step_noise[sched.T - t]))
    return g.sigmoid(a)


def gddpg_actor_sample(actor_params: nn.MlpParams, state_feats, schedule_D: NoiseSchedule, rng,
                       deterministic: bool = False, init_noise=None) -> np.ndarray:
    """Sample a raw action (or a batch) from the diffusion actor."""
    s = np.array(state_feats, dtype=np.float64, ndmin=2)
    B, A = s.shape[0], actor_params.out_dim
    x = rng.standard_normal((B, A)) if init_noise is None else np.broadcast_to(init_noise, (B, A))
    for t in range(schedule_D.T, 0, -1):
        inp = np.concatenate([x, np.broadcast_to(time_embedding(t, schedule_D.T), (B, 3)), s], 1)
        eps = nn.predict(actor_params, inp)
        a_ts, s_ts = schedule_D.transition(t, t - 1)
        sig_t, sig_s = schedule_D.sigma[t], schedule_D.sigma[t - 1]
        x = (x - (s_ts ** 2 / sig_t) * eps) / a_ts
        std = s_ts * sig_s / sig_t
        if not deterministic and std > 0:
            x = x + std * rng.standard_normal((B, A))
    out = 0.5 * np.tanh(0.5 * x) + 0.5
    return out[0] if np.ndim(state_feats) == 1 else out


def ddpg_actor_act(actor_params: nn.MlpParams, state_feats) -> np.ndarray:
    s = np.array(state_feats, dtype=np.float64, ndmin=2)
    out = 0.5 * (np.tanh(nn.predict(actor_params, s)) + 1.0)
    return out[0] if np.ndim(state_feats) == 1 else out


def agent_act(agent: Agent, feats, rng, deterministic: bool) -> np.ndarray:
    if agent.algo == "ddpg":
        return ddpg_actor_act(agent.actor, feats)
    init = np.zeros(agent.actor.out_dim) if deterministic else None
    return gddpg_actor_sample(agent.actor, feats, agent.actor_schedule, rng, deterministic, init)


def init_agent(algo: str, env: EnvConfig, cfg: TrainerConfig, rng) -> Agent:
    S, A = env.state_dim, env.action_dim
    critic = init_critic(S, A, cfg.hidden, rng)
    if algo == "ddpg":
        actor, sched = init_ddpg_actor(S, A, cfg.hidden, rng), None
    elif algo == "gddpg":
        actor = init_gddpg_actor(S, A, cfg.hidden, rng)
        sched = build_schedule(cfg.diffusion_steps, *cfg.actor_beta)
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    return Agent(algo, actor, critic, actor.copy(), critic.copy(), sched)


@dataclass
class TrainResult:
    agent: Agent
    trace: list            # dict rows: iteration, train_reward, eval_reward, penalties
    eval_states: list
    seconds: float

    @property
    def final_eval(self) -> float:
        evals = [r["eval_reward"] for r in self.trace if r["eval_reward"] == r["eval_reward"]]
        return float(evals[-1]) if evals else float("nan")


def evaluate_agent(agent: Agent, env: EnvConfig, states, seed: int):
    """Mean reward of the exploration-free policy over fixed evaluation states."""
    rewards, pens = [], []
    for i, st in enumerate(states):
        a = agent_act(agent, state_features(st.vector, env)[0], substream(seed, "eval-act", i), True)
        res = env_step(st, a, env, child_seed(seed, "eval-step", i))
        rewards.append(res.reward)
        pens.append(res.penalties)
    return float(np.mean(rewards)), np.mean(pens, axis=0)


def _critic_update(agent, opt, s, a, r):
    g = nn.Graph()
    q = nn.forward(agent.critic, np.concatenate([s, a], axis=1), g)
    loss = g.mse(q, g.const(r[:, None]))
    grads = nn.backward(g, np.ones(()), agent.critic, output=loss)
    return opt.step(agent.critic, grads), float(loss.value)


def _actor_update(agent, opt, s, rng):
    g = nn.Graph()
    st = g.const(s)
    if agent.algo == "ddpg":
        a = ddpg_actor_graph(g, agent.actor, st)
    else:
        B, A = s.shape[0], agent.actor.out_dim
        D = agent.actor_schedule.T
        a = gddpg_actor_graph(g, agent.actor, st, agent.actor_schedule,
                              rng.standard_normal((B, A)), rng.standard_normal((D, B, A)))
    q = nn.mlp_apply(g, agent.critic, g.concat([st, a]))
    loss = g.scale(g.sum(q), -1.0 / s.shape[0])
    g.backward(loss)
    grads = g.param_grads(agent.actor)
    return opt.step(agent.actor, grads), -float(loss.value)


def train(algo: str, env: EnvConfig, cfg: TrainerConfig, progress=None) -> TrainResult:
    """Shared loop for DDPG and G-DDPG (one-step episodes)."""
    t_start = time.perf_counter()
    agent = init_agent(algo, env, cfg, substream(cfg.seed, "init", algo))
    opt_a = nn.make_optimizer(cfg.optimizer, cfg.actor_lr)
    opt_c = nn.make_optimizer(cfg.optimizer, cfg.critic_lr)
    buf = ReplayBuffer(cfg.buffer_capacity)
    env_rng = substream(cfg.seed, "env")
    act_rng = substream(cfg.seed, "act")
    upd_rng = substream(cfg.seed, "update")
    eval_rng = substream(cfg.seed, "eval-states")
    eval_states = [env_reset(env, eval_rng) for _ in range(cfg.eval_states)]
    trace = []
    for it in range(cfg.episodes):
        st = env_reset(env, env_rng)
        feats = state_features(st.vector, env)[0]
        a = agent_act(agent, feats, act_rng, deterministic=False)
        frac = it / max(cfg.episodes - 1, 1)
        sigma = cfg.sigma_explore + (cfg.sigma_final - cfg.sigma_explore) * frac
        a = np.clip(a + sigma * act_rng.standard_normal(a.shape), 0.0, 1.0)
        res = env_step(st, a, env, child_seed(cfg.seed, "step", it))
        buf.add(Transition(st.vector, a, res.reward))
        if len(buf) >= cfg.batch_size:
            s_b, a_b, r_b = buf.sample(cfg.batch_size, upd_rng)
            f_b = state_features(s_b, env)
            agent.critic, c_loss = _critic_update(agent, opt_c, f_b, a_b, r_b)
            agent.actor, _ = _actor_update(agent, opt_a, f_b, upd_rng)
            if not np.isfinite(c_loss):
                raise TrainingError("non-finite critic loss", it)
            agent.actor_target = nn.soft_update(agent.actor_target, agent.actor, cfg.tau)
            agent.critic_target = nn.soft_update(agent.critic_target, agent.critic, cfg.tau)
        row = {"iteration": it + 1, "train_reward": res.reward, "eval_reward": float("nan"),
               "pen_device": res.penalties[0], "pen_qoe": res.penalties[1],
               "pen_server": res.penalties[2]}
        if (it + 1) % cfg.eval_every == 0 or it + 1 == cfg.episodes:
            ev, pens = evaluate_agent(agent, env, eval_states, cfg.seed)
            row["eval_reward"] = ev
            if progress:
                progress(it + 1, ev)
        trace.append(row)
    return TrainResult(agent, trace, eval_states, time.perf_counter() - t_start)


def ddpg_train(env: EnvConfig, cfg: TrainerConfig, progress=None) -> TrainResult:
    return train("ddpg", env, cfg, progress)


def gddpg_train(env: EnvConfig, cfg: TrainerConfig, progress=None) -> TrainResult:
    return train("gddpg", env, cfg, progress)


# exhaustive baseline ------------------------------------------------------

MAX_GRID = 100_000


def brute_force_best(env: EnvConfig, state: EnvState, power_levels: int = 8, seed: int = 0):
    """Evaluate every (power grid, t0, t_k) action; ties go to the lowest power index.

    Returns (best reward, best raw action, number of evaluations).
    """
    K, Ts, Te = env.K, env.T_s, env.T_e
    n = power_levels ** K * Ts * Te ** K
    if n > MAX_GRID:
        raise ConfigError(f"grid of {n} actions exceeds the {MAX_GRID} limit")
    levels = np.linspace(0.0, 1.0, power_levels) if power_levels > 1 else np.array([1.0])
    best, best_a = -np.inf, None
    for p_idx in np.ndindex(*(power_levels,) * K):
        p01 = levels[list(p_idx)]
        for t0 in range(1, Ts + 1):
            for tk in np.ndindex(*(Te,) * K):
                raw = encode_action(env, p01, t0, tuple(t + 1 for t in tk))
                r = env_step(state, raw, env, seed).reward
                if r > best:
                    best, best_a = r, raw
    return best, best_a, n
