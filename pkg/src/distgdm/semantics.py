"""Prompt registry, semantic distances and KL divergence along denoising paths."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, PromptLookupError, UnsupportedError


@dataclass(frozen=True, eq=False)
class PromptSpec:
    """A prompt: id, display text and embedding tau(c).

    ``means``/``weights`` optionally describe a Gaussian mixture for p(z0|c);
    by default the prompt induces a single Gaussian centred on the embedding.
    """

    id: str
    text: str
    embedding: np.ndarray
    means: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        means = emb[None, :] if self.means is None else np.atleast_2d(np.asarray(self.means, float))
        if means.shape[1] != emb.shape[0]:
            raise ConfigError(f"prompt {self.id}: mixture means have wrong dimension")
        w = np.full(len(means), 1.0 / len(means)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (len(means),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError(f"prompt {self.id}: mixture weights must be non-negative and sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", w)

    @property
    def is_single(self) -> bool:
        return len(self.means) == 1

    @property
    def mean(self) -> np.ndarray:
        """E[z0 | c]."""
        return self.weights @ self.means


@dataclass(frozen=True, eq=False)
class PathPoint:
    """A realised latent on the denoising path of one prompt."""

    prompt_id: str
    t: int
    latent: np.ndarray


@dataclass(frozen=True, eq=False)
class PromptWorld:
    """Registry of prompts; each prompt induces p(z0|c) = N(means, s0^2 I) mixture."""

    d: int
    s0: float
    prompts: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("latent dimension d must be >= 1")
        if not self.s0 > 0:
            raise ConfigError("s0 must be positive")
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ConfigError("prompt ids must be unique")
        for p in self.prompts:
            if p.embedding.shape != (self.d,):
                raise ConfigError(f"prompt {p.id}: embedding dimension must be {self.d}")
        object.__setattr__(self, "prompts", tuple(self.prompts))
        object.__setattr__(self, "_index", {p.id: i for i, p in enumerate(self.prompts)})

    def __len__(self):
        return len(self.prompts)

    def get(self, prompt) -> PromptSpec:
        if isinstance(prompt, PromptSpec):
            prompt = prompt.id
        try:
            return self.prompts[self._index[prompt]]
        except KeyError:
            raise PromptLookupError(f"unknown prompt {prompt!r}") from None

    def index(self, prompt) -> int:
        return self._index[self.get(prompt).id]

    @property
    def ids(self) -> list:
        return [p.id for p in self.prompts]

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([p.embedding for p in self.prompts])


def ring_vocabulary(n: int = 50, radius: float = 2.0) -> list:
    """``n`` prompts evenly spaced on a circle in the plane."""
    ang = 2.0 * np.pi * np.arange(n) / n
    return [PromptSpec(f"c{i:02d}", f"object {i}", radius * np.array([np.cos(a), np.sin(a)]))
            for i, a in enumerate(ang)]


def default_world(n: int = 50, radius: float = 2.0, s0: float = 0.1) -> PromptWorld:
    return PromptWorld(2, s0, tuple(ring_vocabulary(n, radius)))


def _check_t(schedule, t):
    if not 0 <= t <= schedule.T:
        raise DomainError(f"step {t} outside [0, {schedule.T}]")


def semantic_distance(world: PromptWorld, schedule, c_i, t_i: int, c_j, t_j: int) -> float:
    """Distance between expected path points alpha[t] * E[z0|c]."""
    _check_t(schedule, t_i)
    _check_t(schedule, t_j)
    pi, pj = world.get(c_i), world.get(c_j)
    return float(np.linalg.norm(schedule.alpha[t_i] * pi.mean - schedule.alpha[t_j] * pj.mean))


def path_point_distance(p: PathPoint, q: PathPoint) -> float:
    """Empirical variant: distance between two realised path points."""
    return float(np.linalg.norm(np.asarray(p.latent) - np.asarray(q.latent)))


def _log_marginal(prompt: PromptSpec, s0, alpha, sigma, z):
    var = alpha ** 2 * s0 ** 2 + sigma ** 2
    d = z.shape[-1]
    diff = z[:, None, :] - alpha * prompt.means[None, :, :]
    logc = -0.5 * np.sum(diff * diff, axis=-1) / var - 0.5 * d * np.log(2 * np.pi * var)
    logc = logc + np.log(np.maximum(prompt.weights, 1e-300))
    m = logc.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(logc - m).sum(axis=1, keepdims=True)))[:, 0]


def path_kl(world: PromptWorld, schedule, c_i, c_j, t: int, mode: str = "closed",
            n_samples: int = 20000, rng=None) -> float:
    """KL(p(z_t|c_i) || p(z_t|c_j)) for the diffused prompt marginals."""
    return path_kl_estimate(world, schedule, c_i, c_j, t, mode, n_samples, rng)[0]


def path_kl_estimate(world, schedule, c_i, c_j, t, mode="closed", n_samples=20000, rng=None):
    """Return (KL, standard error); the error is 0 in closed form."""
    _check_t(schedule, t)
    pi, pj = world.get(c_i), world.get(c_j)
    a, s = schedule.alpha[t], schedule.sigma[t]
    if mode == "closed":
        if not (pi.is_single and pj.is_single):
            raise UnsupportedError("closed-form KL needs single-Gaussian prompts; use mode='mc'")
        var = a ** 2 * world.s0 ** 2 + s ** 2
        diff = pi.embedding - pj.embedding
        return float(a ** 2 * diff @ diff / (2.0 * var)), 0.0
    if mode != "mc":
        raise ValueError(f"unknown KL mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    comp = rng.choice(len(pi.means), size=n_samples, p=pi.weights)
    scale = np.sqrt(a ** 2 * world.s0 ** 2 + s ** 2)
    z = a * pi.means[comp] + scale * rng.standard_normal((n_samples, world.d))
    diff = _log_marginal(pi, world.s0, a, s, z) - _log_marginal(pj, world.s0, a, s, z)
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_samples))


@dataclass(frozen=True, eq=False)
class SwitchReport:
    endpoint_distance: float
    kl_at_switch: float
    distance_ok: bool
    kl_ok: bool

    @property
    def feasible(self) -> bool:
        return self.distance_ok and self.kl_ok


def switch_feasibility(world, schedule, c_i, c_j, t_off: int,
                       theta_d: float = 1.0, theta_k: float = 0.1) -> SwitchReport:
    """Advisory check of whether a prompt switch at step ``t_off`` is benign."""
    if not 1 <= t_off <= schedule.T - 1:
        raise DomainError(f"t_off must lie in [1, {schedule.T - 1}]")
    dist = semantic_distance(world, schedule, c_i, 0, c_j, 0)
    pi, pj = world.get(c_i), world.get(c_j)
    mode = "closed" if pi.is_single and pj.is_single else "mc"
    kl = path_kl(world, schedule, c_i, c_j, t_off, mode=mode)
    return SwitchReport(dist, kl, dist <= theta_d, kl <= theta_k)
