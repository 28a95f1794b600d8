"""Variance-preserving discrete diffusion: schedules, forward/reverse steps,
the closed-form oracle denoiser for the Gaussian prompt world, a learned MLP
denoiser, and the linear toy codec standing in for an image autoencoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core as nn
from .errors import ConfigError, DimensionError, DomainError, TrainingError
from .semantics import PromptWorld

DEFAULT_T = 50
# Linear beta range that drives the chain to (numerically) pure noise at T.
DEFAULT_BETA = (1e-4, 0.4)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Tables alpha[t], sigma[t] for t = 0..T.

    ``base_index`` maps each step of a respaced schedule back to the step of
    the schedule it was derived from (identity for a freshly built one).
    """

    alpha: np.ndarray
    sigma: np.ndarray
    base_index: np.ndarray
    base_T: int

    @property
    def T(self) -> int:
        return len(self.alpha) - 1

    def gamma(self, t):
        """Signal-to-noise ratio alpha^2 / sigma^2 (infinite at t = 0)."""
        with np.errstate(divide="ignore"):
            return self.alpha[t] ** 2 / self.sigma[t] ** 2

    def transition(self, t: int, s: int):
        return transition_coeffs(self, t, s)


def build_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA[0],
                   beta_max: float = DEFAULT_BETA[1]) -> NoiseSchedule:
    """Linear-beta VP schedule: alpha[t] = sqrt(prod_{i<=t} (1 - beta_i))."""
    if int(T) != T or T < 1:
        raise ConfigError(f"schedule length T must be a positive integer, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    T = int(T)
    betas = np.linspace(beta_min, beta_max, T)
    alpha2 = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    alpha = np.sqrt(alpha2)
    sigma = np.sqrt(1.0 - alpha2)
    return NoiseSchedule(alpha, sigma, np.arange(T + 1), T)


def respace(schedule: NoiseSchedule, n: int) -> NoiseSchedule:
    """Sub-sample ``schedule`` onto ``n`` evenly spaced steps (same endpoints)."""
    if not 1 <= n <= schedule.T:
        raise ConfigError(f"cannot respace a {schedule.T}-step schedule onto {n} steps")
    idx = np.round(np.linspace(0, schedule.T, n + 1)).astype(int)
    return NoiseSchedule(schedule.alpha[idx], schedule.sigma[idx], schedule.base_index[idx],
                         schedule.base_T)


def _check_step(schedule, t, lo=1):
    if int(t) != t or not lo <= t <= schedule.T:
        raise DomainError(f"step {t} outside [{lo}, {schedule.T}]")


def forward_sample(schedule: NoiseSchedule, z0, t: int, rng=None, eps=None) -> np.ndarray:
    """Draw z_t = alpha[t] z0 + sigma[t] eps.  ``t = 0`` is allowed as an edge case."""
    _check_step(schedule, t, lo=0)
    z0 = np.asarray(z0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    return schedule.alpha[t] * z0 + schedule.sigma[t] * np.asarray(eps, dtype=np.float64)


def transition_coeffs(schedule: NoiseSchedule, t: int, s: int):
    """(alpha_{t|s}, sigma_{t|s}) of q(z_t | z_s)."""
    if not (schedule.T >= t > s >= 0):
        raise DomainError(f"need T >= t > s >= 0, got t={t}, s={s}")
    a_ts = schedule.alpha[t] / schedule.alpha[s]
    var = schedule.sigma[t] ** 2 - a_ts ** 2 * schedule.sigma[s] ** 2
    return a_ts, float(np.sqrt(max(var, 0.0)))


# oracle -------------------------------------------------------------------

def oracle_z0(world: PromptWorld, schedule: NoiseSchedule, z_t, t: int, prompt) -> np.ndarray:
    """Posterior mean E[z0 | z_t, c] for the prompt's Gaussian (mixture) p(z0|c)."""
    _check_step(schedule, t)
    p = world.get(prompt)
    a, s = schedule.alpha[t], schedule.sigma[t]
    if s == 0.0:
        raise DomainError("sigma[t] = 0; t = 0 is not a denoising input")
    z = np.asarray(z_t, dtype=np.float64)
    if z.shape[-1] != world.d:
        raise DimensionError(f"latent width {z.shape[-1]} != world dimension {world.d}")
    s02 = world.s0 ** 2
    var = a * a * s02 + s * s
    zz = np.atleast_2d(z)
    # per-component posterior means, shape (N, J, d)
    post = (a * s02 * zz[:, None, :] + s * s * p.means[None, :, :]) / var
    if p.is_single:
        out = post[:, 0, :]
    else:
        diff = zz[:, None, :] - a * p.means[None, :, :]
        logw = -0.5 * np.sum(diff * diff, axis=-1) / var + np.log(np.maximum(p.weights, 1e-300))
        logw -= logw.max(axis=1, keepdims=True)
        r = np.exp(logw)
        r /= r.sum(axis=1, keepdims=True)
        out = np.einsum("nj,njd->nd", r, post)
    return out.reshape(z.shape)


def oracle_z0_var(world: PromptWorld, schedule: NoiseSchedule, z_t, t: int, prompt) -> np.ndarray:
    """Per-dimension posterior variance Var[z0 | z_t, c] (same shape as ``z_t``)."""
    _check_step(schedule, t)
    p = world.get(prompt)
    a, s = schedule.alpha[t], schedule.sigma[t]
    s02 = world.s0 ** 2
    var = a * a * s02 + s * s
    within = s02 * s * s / var
    z = np.asarray(z_t, dtype=np.float64)
    if p.is_single:
        return np.full(z.shape, within)
    zz = np.atleast_2d(z)
    post = (a * s02 * zz[:, None, :] + s * s * p.means[None, :, :]) / var
    diff = zz[:, None, :] - a * p.means[None, :, :]
    logw = -0.5 * np.sum(diff * diff, axis=-1) / var + np.log(np.maximum(p.weights, 1e-300))
    logw -= logw.max(axis=1, keepdims=True)
    r = np.exp(logw)
    r /= r.sum(axis=1, keepdims=True)
    m = np.einsum("nj,njd->nd", r, post)
    between = np.einsum("nj,njd->nd", r, (post - m[:, None, :]) ** 2)
    return (within + between).reshape(z.shape)


def oracle_eps(world: PromptWorld, schedule: NoiseSchedule, z_t, t: int, prompt) -> np.ndarray:
    """Noise prediction implied by the exact posterior mean."""
    z0 = oracle_z0(world, schedule, z_t, t, prompt)
    return (np.asarray(z_t, dtype=np.float64) - schedule.alpha[t] * z0) / schedule.sigma[t]


# reverse step ---------------------------------------------------------------

def denoise_step(schedule: NoiseSchedule, z_t, t: int, eps_hat, rng=None,
                 deterministic: bool = False, s: int | None = None, z0_var=0.0) -> np.ndarray:
    """One reverse transition z_t -> z_s (s = t - 1 by default).

    mean     = (z_t - sigma_{t|s}^2 / sigma_t * eps_hat) / alpha_{t|s}
    variance = sigma_{t|s}^2 * sigma_s^2 / sigma_t^2

    ``z0_var`` is an optional posterior variance of the clean latent.  When a
    denoiser can supply it (the oracle can), the variance gains the term
    (alpha_s sigma_{t|s}^2 / sigma_t^2)^2 * z0_var, which turns the step into
    the exact reverse kernel for Gaussian data.  With the default 0 the step
    is the usual plug-in approximation.
    """
    _check_step(schedule, t)
    s = t - 1 if s is None else s
    a_ts, s_ts = transition_coeffs(schedule, t, s)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise DimensionError(f"eps_hat shape {eps_hat.shape} != latent shape {z_t.shape}")
    sig_t, sig_s = schedule.sigma[t], schedule.sigma[s]
    mean = (z_t - (s_ts ** 2 / sig_t) * eps_hat) / a_ts
    if deterministic:
        return mean
    var = s_ts ** 2 * sig_s ** 2 / sig_t ** 2 + (schedule.alpha[s] * s_ts ** 2 / sig_t ** 2) ** 2 * z0_var
    if np.all(var == 0.0):
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(z_t.shape)


def reverse_variance(schedule: NoiseSchedule, t: int, s: int | None = None) -> float:
    s = t - 1 if s is None else s
    _, s_ts = transition_coeffs(schedule, t, s)
    return float(s_ts ** 2 * schedule.sigma[s] ** 2 / schedule.sigma[t] ** 2)


# denoisers -------------------------------------------------------------------

class OracleDenoiser:
    """Exact noise prediction for the Gaussian prompt world."""

    def __init__(self, world: PromptWorld):
        self.world = world

    def eps(self, schedule, z_t, t, prompt):
        return oracle_eps(self.world, schedule, z_t, t, prompt)

    def z0_var(self, schedule, z_t, t, prompt):
        return oracle_z0_var(self.world, schedule, z_t, t, prompt)


def time_embedding(t, T: int) -> np.ndarray:
    """(t/T, sin 2 pi t/T, cos 2 pi t/T); ``t`` may be an array."""
    u = np.asarray(t, dtype=np.float64) / T
    return np.stack([u, np.sin(2 * np.pi * u), np.cos(2 * np.pi * u)], axis=-1)


TIME_EMB_DIM = 3


def init_denoiser(d: int, rng, hidden: int = 64) -> nn.MlpParams:
    """MLP eps(z_t, emb(t), tau(c)) with two tanh hidden layers."""
    return nn.init_mlp([2 * d + TIME_EMB_DIM, hidden, hidden, d], ["tanh", "tanh", "identity"], rng)


def denoiser_input(z_t, base_t, base_T, cond) -> np.ndarray:
    z_t = np.atleast_2d(z_t)
    n = z_t.shape[0]
    emb = np.broadcast_to(time_embedding(base_t, base_T), (n, TIME_EMB_DIM))
    cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (n, z_t.shape[1]))
    return np.concatenate([z_t, emb, cond], axis=1)


class LearnedDenoiser:
    """Wraps trained MLP parameters behind the same interface as the oracle."""

    def __init__(self, params: nn.MlpParams, world: PromptWorld):
        if params.in_dim != 2 * world.d + TIME_EMB_DIM or params.out_dim != world.d:
            raise DimensionError("denoiser parameters do not match the world dimension")
        self.params = params
        self.world = world

    def z0_var(self, schedule, z_t, t, prompt):
        return 0.0

    def eps(self, schedule, z_t, t, prompt):
        z = np.asarray(z_t, dtype=np.float64)
        cond = self.world.get(prompt).embedding
        x = denoiser_input(z, schedule.base_index[t], schedule.base_T, cond)
        return nn.predict(self.params, x).reshape(z.shape)


@dataclass
class DenoiserTrainConfig:
    batch_size: int = 128
    steps: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    null_condition_prob: float = 0.0
    seed: int = 0


def train_denoiser(world: PromptWorld, schedule: NoiseSchedule, params: nn.MlpParams,
                   config: DenoiserTrainConfig):
    """Minimise E||eps - eps_theta(z_t, t, tau(c))||^2 with t uniform on 1..T.

    Returns (trained params, per-step loss list).
    """
    if len(world) < 1:
        raise ConfigError("world has no prompts")
    rng = np.random.default_rng(config.seed)
    opt = nn.make_optimizer(config.optimizer, config.learning_rate)
    emb = world.embeddings
    losses = []
    for step in range(config.steps):
        B = config.batch_size
        ci = rng.integers(len(world), size=B)
        comps = np.array([rng.choice(len(world.prompts[i].means), p=world.prompts[i].weights)
                          for i in ci])
        means = np.stack([world.prompts[i].means[j] for i, j in zip(ci, comps)])
        z0 = means + world.s0 * rng.standard_normal((B, world.d))
        t = rng.integers(1, schedule.T + 1, size=B)
        eps = rng.standard_normal((B, world.d))
        zt = schedule.alpha[t][:, None] * z0 + schedule.sigma[t][:, None] * eps
        cond = emb[ci].copy()
        if config.null_condition_prob > 0:
            cond[rng.random(B) < config.null_condition_prob] = 0.0
        x = np.concatenate([zt, time_embedding(schedule.base_index[t], schedule.base_T), cond], 1)
        g = nn.Graph()
        out = nn.forward(params, x, g)
        loss = g.mse(out, g.const(eps))
        val = float(loss.value)
        if not np.isfinite(val):
            raise TrainingError("non-finite denoiser loss", step)
        grads = nn.backward(g, np.ones(()), params, output=loss)
        params = opt.step(params, grads)
        losses.append(val)
    return params, losses


def reverse_step(schedule, denoiser, z, t, prompt, rng=None, deterministic=False, s=None):
    """Denoise ``z`` from t to s with ``denoiser`` (uses its posterior variance if any)."""
    eps = denoiser.eps(schedule, z, t, prompt)
    var = 0.0 if deterministic else getattr(denoiser, "z0_var", lambda *a: 0.0)(schedule, z, t, prompt)
    return denoise_step(schedule, z, t, eps, rng, deterministic, s, var)


def sample_chain(world: PromptWorld, schedule: NoiseSchedule, denoiser, prompt, n: int, rng,
                 deterministic: bool = False, record: bool = False):
    """Run ``n`` full reverse chains from pure noise; optionally keep every step."""
    z = rng.standard_normal((n, world.d))
    path = [z.copy()] if record else None
    for t in range(schedule.T, 0, -1):
        z = reverse_step(schedule, denoiser, z, t, prompt, rng, deterministic)
        if record:
            path.append(z.copy())
    return (z, path) if record else z


# toy codec -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ToyCodec:
    """Linear lift from a d-dim latent to a D_x-dim ambient vector."""

    lift: np.ndarray

    @property
    def d(self) -> int:
        return self.lift.shape[0]

    @property
    def D_x(self) -> int:
        return self.lift.shape[1]

    @property
    def f(self) -> int:
        return self.D_x // self.d

    @property
    def pinv(self) -> np.ndarray:
        return np.linalg.pinv(self.lift)


def make_codec(d: int = 2, D_x: int = 8, seed: int = 0) -> ToyCodec:
    if D_x < d or D_x % d:
        raise ConfigError("ambient dimension must be a positive multiple of d")
    lift = np.random.default_rng(seed).standard_normal((d, D_x)) / np.sqrt(d)
    return ToyCodec(lift)


def decode(codec: ToyCodec, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != codec.d:
        raise DimensionError(f"latent width {z.shape[-1]} != codec latent dimension {codec.d}")
    return z @ codec.lift


def encode(codec: ToyCodec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != codec.D_x:
        raise DimensionError(f"ambient width {x.shape[-1]} != codec dimension {codec.D_x}")
    return x @ codec.pinv
