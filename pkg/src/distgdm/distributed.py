"""Split denoising between an edge server and K devices.

The server starts every chain from pure noise and runs ``t_0`` shared steps
under an anchor prompt.  Device k receives the server's latent at step
``t_k`` through a lossy channel and finishes steps t_k..1 under its own
prompt.  A plan of length T runs on the base schedule respaced to T steps, so
``t_0`` and ``t_k`` count actual denoising calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import dbw_to_watts, watts_to_dbw
from .diffusion import NoiseSchedule, ToyCodec, decode, make_codec, respace, reverse_step
from .errors import ConfigError, PlanError
from .rng import substream


@dataclass(frozen=True)
class EnergyModel:
    delta_0: float = 0.5
    delta_k: tuple = (1.0, 1.0, 1.0)
    beta: float = 0.1
    E_T: float = 20.0
    E_Tk: tuple = (8.0, 8.0, 8.0)

    def __post_init__(self):
        object.__setattr__(self, "delta_k", tuple(float(v) for v in self.delta_k))
        object.__setattr__(self, "E_Tk", tuple(float(v) for v in self.E_Tk))
        if len(self.delta_k) != len(self.E_Tk):
            raise ConfigError("delta_k and E_Tk must have one entry per device")
        vals = (self.delta_0, self.beta, self.E_T) + self.delta_k + self.E_Tk
        if any(v < 0 for v in vals):
            raise ConfigError("energy model entries must be non-negative")

    @property
    def K(self) -> int:
        return len(self.delta_k)


@dataclass(frozen=True)
class InferencePlan:
    """One split-inference job.  Powers are in watts."""

    anchor: str
    prompts: tuple
    t0: int
    tk: tuple
    powers_w: tuple
    T: int
    deterministic: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("prompts", "tk", "powers_w"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        K = len(self.prompts)
        if K < 1 or len(self.tk) != K or len(self.powers_w) != K:
            raise PlanError("prompts, tk and powers_w must have one entry per device")
        if self.t0 < 0 or min(self.tk) < 1:
            raise PlanError("need t0 >= 0 and every t_k >= 1")
        if self.t0 + max(self.tk) > self.T:
            raise PlanError(f"t0 + max(t_k) = {self.t0 + max(self.tk)} exceeds T = {self.T}")
        if any(p < 0 for p in self.powers_w):
            raise PlanError("transmit powers must be non-negative")

    @property
    def K(self) -> int:
        return len(self.prompts)

    @property
    def powers_dbw(self) -> np.ndarray:
        return watts_to_dbw(np.asarray(self.powers_w, dtype=np.float64))

    @classmethod
    def compact(cls, anchor, prompts, t0, tk, powers_dbw, deterministic=False, seed=0):
        """Plan whose length is exactly t0 + max(t_k)."""
        tk = tuple(int(v) for v in tk)
        return cls(anchor, tuple(prompts), int(t0), tk,
                   tuple(float(p) for p in dbw_to_watts(np.asarray(powers_dbw, float))),
                   int(t0) + max(tk), deterministic, seed)


@dataclass
class InferenceOutcome:
    final: np.ndarray          # (K, d) final latents
    sent: np.ndarray           # (K, d) server latents before the channel
    received: np.ndarray       # (K, d) latents after the channel
    bep: np.ndarray            # (K,)
    clipped: np.ndarray        # (K,) clipped components per handoff
    flipped_bits: np.ndarray   # (K,)
    ambient: np.ndarray        # (K, D_x) decoded outputs
    server_compute: float
    transmit: float
    device_compute: np.ndarray  # (K,)

    @property
    def server_energy(self) -> float:
        return self.server_compute + self.transmit


def energy_usage(plan: InferencePlan, model: EnergyModel):
    """(server energy, per-device energies) = (d0 t0 + beta sum P, d_k t_k)."""
    if len(model.delta_k) != plan.K:
        raise ConfigError("energy model and plan disagree on the number of devices")
    server = model.delta_0 * plan.t0 + model.beta * float(sum(plan.powers_w))
    devices = np.array([d * t for d, t in zip(model.delta_k, plan.tk)], dtype=np.float64)
    return server, devices


@dataclass
class ViolationReport:
    device_budget: np.ndarray
    qoe: np.ndarray
    server_budget: float

    @property
    def any(self) -> bool:
        return bool(self.device_budget.any() or self.qoe.any() or self.server_budget > 0)


def check_constraints(plan: InferencePlan, model: EnergyModel, qoe_values, q_threshold: float):
    qoe_values = np.asarray(qoe_values, dtype=np.float64)
    if qoe_values.shape != (plan.K,):
        raise ConfigError("need one QoE value per device")
    server, devices = energy_usage(plan, model)
    return ViolationReport(
        np.maximum(0.0, devices - np.asarray(model.E_Tk)),
        np.maximum(0.0, q_threshold - qoe_values),
        max(0.0, server - model.E_T),
    )


def plan_schedule(schedule: NoiseSchedule, T: int) -> NoiseSchedule:
    if T > schedule.T:
        raise PlanError(f"plan length {T} exceeds base schedule length {schedule.T}")
    return schedule if T == schedule.T else respace(schedule, T)


def run_distributed(world, schedule: NoiseSchedule, denoiser, plan: InferencePlan, channel,
                    codec: ToyCodec | None = None, energy: EnergyModel | None = None,
                    z_T=None) -> InferenceOutcome:
    """Execute ``plan``; returns final latents, channel diagnostics and energy ledger."""
    for p in (plan.anchor,) + plan.prompts:
        world.get(p)
    sch = plan_schedule(schedule, plan.T)
    det = plan.deterministic
    z = substream(plan.seed, "init").standard_normal(world.d) if z_T is None else np.array(z_T, float)
    srv_rng = substream(plan.seed, "server")

    # shared prefix, then keep advancing under the anchor until the earliest handoff
    states = {}
    lowest = min(plan.tk)
    t = plan.T
    states[t] = z
    while t > lowest:
        z = reverse_step(sch, denoiser, z, t, plan.anchor, srv_rng, det)
        t -= 1
        states[t] = z

    K = plan.K
    out = {k: np.zeros((K, world.d)) for k in ("final", "sent", "received")}
    beps, clipped, flipped = np.zeros(K), np.zeros(K, int), np.zeros(K, int)
    p_dbw = plan.powers_dbw
    for k in range(K):
        sent = states[plan.tk[k]]
        tx = channel.transmit(k, sent, float(p_dbw[k]), substream(plan.seed, "channel", k))
        zk = tx.latent
        dev_rng = substream(plan.seed, "device", k)
        for t in range(plan.tk[k], 0, -1):
            zk = reverse_step(sch, denoiser, zk, t, plan.prompts[k], dev_rng, det)
        out["sent"][k], out["received"][k], out["final"][k] = sent, tx.latent, zk
        beps[k], clipped[k], flipped[k] = tx.bep, tx.clipped, tx.flipped_bits

    codec = codec or make_codec(world.d)
    if energy is None:
        energy = EnergyModel(delta_k=(1.0,) * K, E_Tk=(np.inf,) * K)
    server, devices = energy_usage(plan, energy)
    return InferenceOutcome(
        final=out["final"], sent=out["sent"], received=out["received"], bep=beps,
        clipped=clipped, flipped_bits=flipped, ambient=decode(codec, out["final"]),
        server_compute=energy.delta_0 * plan.t0,
        transmit=server - energy.delta_0 * plan.t0,
        device_compute=devices,
    )


OUTCOME_FIELDS = ("device", "t0", "tk", "power_dbw", "bep", "qoe",
                  "server_compute", "transmit", "device_energy")


def outcome_rows(plan: InferencePlan, outcome: InferenceOutcome, qoe=None) -> list:
    """One CSV-ready dict per device."""
    rows = []
    p_dbw = plan.powers_dbw
    for k in range(plan.K):
        rows.append({
            "device": k + 1, "t0": plan.t0, "tk": plan.tk[k], "power_dbw": float(p_dbw[k]),
            "bep": float(outcome.bep[k]),
            "qoe": float("nan") if qoe is None else float(qoe[k]),
            "server_compute": outcome.server_compute, "transmit": outcome.transmit,
            "device_energy": float(outcome.device_compute[k]),
        })
    return rows
