"""Experiment configuration: a YAML file validated into typed blocks.

Every block has defaults, so an empty file is a valid configuration; the
defaults reproduce the three-device setup used for the training comparison.
Validation errors carry the dotted path of the offending field.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import agents, channel, diffusion, distributed, rl, semantics
from .errors import ConfigError


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PromptEntry(_Block):
    id: str
    text: str = ""
    embedding: list[float]


class WorldBlock(_Block):
    d: int = Field(2, ge=1)
    s0: float = Field(0.1, gt=0)
    ring_size: int = Field(50, ge=1)
    ring_radius: float = Field(2.0, gt=0)
    prompts: Optional[list[PromptEntry]] = None   # overrides the ring vocabulary

    @model_validator(mode="after")
    def _dims(self):
        if self.prompts is None and self.d != 2:
            raise ValueError("the ring vocabulary needs d = 2; supply explicit prompts otherwise")
        for p in self.prompts or []:
            if len(p.embedding) != self.d:
                raise ValueError(f"prompt {p.id}: embedding has {len(p.embedding)} entries, d = {self.d}")
        if self.prompts is not None and len({p.id for p in self.prompts}) != len(self.prompts):
            raise ValueError("prompt ids must be unique")
        return self


class ScheduleBlock(_Block):
    T: int = Field(diffusion.DEFAULT_T, ge=1)
    beta_min: float = Field(diffusion.DEFAULT_BETA[0], gt=0, lt=1)
    beta_max: float = Field(diffusion.DEFAULT_BETA[1], gt=0, lt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.beta_min > self.beta_max:
            raise ValueError("beta_min must not exceed beta_max")
        return self


class ChannelBlock(_Block):
    m: float = Field(2.0, gt=0)
    ms: float = Field(1.5, gt=1)
    N0: float = Field(channel.DEFAULT_N0, gt=0)
    R: float = Field(4.0, gt=0)
    p_min_dbw: float = 0.0
    p_max_dbw: float = 25.0

    @model_validator(mode="after")
    def _bounds(self):
        if self.p_min_dbw >= self.p_max_dbw:
            raise ValueError("p_min_dbw must be below p_max_dbw")
        return self


class EnergyBlock(_Block):
    delta_0: float = Field(0.5, ge=0)
    delta_k: list[float] = [1.0, 1.0, 1.0]
    beta: float = Field(0.1, ge=0)
    E_T: float = Field(20.0, ge=0)
    E_Tk: list[float] = [8.0, 8.0, 8.0]


class PersonaEntry(_Block):
    name: str = ""
    open: float = Field(0.5, ge=0, le=1)
    consc: float = Field(0.5, ge=0, le=1)
    extra: float = Field(0.5, ge=0, le=1)
    agree: float = Field(0.5, ge=0, le=1)
    neuro: float = Field(0.5, ge=0, le=1)


def _default_personas():
    names = ("agreeable", "open", "neutral")
    return [PersonaEntry(name=n, **vars(p)) for n, p in zip(names, agents.DEFAULT_PERSONAS)]


class WeightsBlock(_Block):
    fidelity: float = 0.6
    fidelity_agree: float = 0.2
    novelty: float = 0.3
    artifact: float = 0.4
    artifact_neuro: float = 0.3
    artifact_consc: float = 0.2
    jitter: float = Field(0.03, ge=0)
    jitter_extra: float = 0.5
    s_q: float = Field(1.0, gt=0)
    s_a: float = Field(2.0, gt=0)


class EvaluatorBlock(_Block):
    mode: Literal["builtin", "external"] = "builtin"
    endpoint: Optional[list[str]] = None
    timeout: float = Field(10.0, gt=0)
    retries: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _endpoint(self):
        if self.mode == "external" and not self.endpoint:
            raise ValueError("external mode requires an endpoint command")
        return self


class AgentsBlock(_Block):
    personas: list[PersonaEntry] = Field(default_factory=_default_personas)
    weights: WeightsBlock = Field(default_factory=WeightsBlock)
    q_threshold: float = Field(0.6, ge=0, le=1)
    evaluator: EvaluatorBlock = Field(default_factory=EvaluatorBlock)


class TrainerBlock(_Block):
    episodes: int = Field(3000, ge=1)
    batch_size: int = Field(64, ge=1)
    tau: float = Field(0.005, gt=0, le=1)
    sigma_explore: float = Field(0.1, ge=0)
    sigma_final: float = Field(0.01, ge=0)
    diffusion_steps: int = Field(5, ge=1)
    actor_beta: tuple[float, float] = (0.05, 0.5)
    actor_lr: float = Field(1e-4, gt=0)
    critic_lr: float = Field(1e-4, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    hidden: int = Field(128, ge=1)
    buffer_capacity: int = Field(100_000, ge=1)
    eval_every: int = Field(100, ge=1)
    eval_states: int = Field(16, ge=1)


class RlBlock(_Block):
    T_s: int = Field(8, ge=1)
    T_e: int = Field(8, ge=1)
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    prompt_pool: Optional[list[str]] = None
    fixed_prompts: Optional[list[str]] = None
    fixed_gains: Optional[list[float]] = None
    fixed_seed: Optional[int] = None
    trainer: TrainerBlock = Field(default_factory=TrainerBlock)


class BepSweepBlock(_Block):
    grid: list[float] = [0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.15]
    seeds: int = Field(100, ge=1)
    t0: int = Field(4, ge=0)
    t1: int = Field(6, ge=1)
    prompt: str = "c00"
    persona: int = Field(0, ge=0)


class StepSweepBlock(_Block):
    bep: float = Field(0.03, ge=0, le=0.5)
    t0_values: list[int] = [2, 3, 4]
    t2_values: list[int] = [2, 3, 4, 5, 6, 7, 8]
    anchor: str = "c00"
    device_prompt: str = "c06"
    seeds: int = Field(100, ge=1)
    personas: list[int] = [0, 1]


class SampleBlock(_Block):
    prompts: list[str] = ["c00", "c06"]
    chains: int = Field(8, ge=1)


class ExperimentConfig(_Block):
    seed: int = 0
    output_dir: str = "runs"
    deterministic: bool = False
    world: WorldBlock = Field(default_factory=WorldBlock)
    schedule: ScheduleBlock = Field(default_factory=ScheduleBlock)
    inference_schedule: ScheduleBlock = Field(
        default_factory=lambda: ScheduleBlock(beta_min=rl.INFERENCE_BETA[0],
                                              beta_max=rl.INFERENCE_BETA[1]))
    channel: ChannelBlock = Field(default_factory=ChannelBlock)
    energy: EnergyBlock = Field(default_factory=EnergyBlock)
    agents: AgentsBlock = Field(default_factory=AgentsBlock)
    rl: RlBlock = Field(default_factory=RlBlock)
    sweep_bep: BepSweepBlock = Field(default_factory=BepSweepBlock)
    sweep_steps: StepSweepBlock = Field(default_factory=StepSweepBlock)
    sample: SampleBlock = Field(default_factory=SampleBlock)

    @model_validator(mode="after")
    def _cross(self):
        K = len(self.agents.personas)
        if len(self.energy.delta_k) != K:
            raise ValueError(f"energy.delta_k has {len(self.energy.delta_k)} entries, "
                             f"agents.personas defines {K} users")
        if len(self.energy.E_Tk) != K:
            raise ValueError(f"energy.E_Tk has {len(self.energy.E_Tk)} entries, "
                             f"agents.personas defines {K} users")
        T_inf = self.inference_schedule.T
        if self.rl.T_s + self.rl.T_e > T_inf:
            raise ValueError("rl.T_s + rl.T_e exceeds inference_schedule.T")
        ids = self.prompt_ids()
        refs = [("sweep_bep.prompt", self.sweep_bep.prompt),
                ("sweep_steps.anchor", self.sweep_steps.anchor),
                ("sweep_steps.device_prompt", self.sweep_steps.device_prompt)]
        refs += [(f"sample.prompts.{i}", p) for i, p in enumerate(self.sample.prompts)]
        for name in ("prompt_pool", "fixed_prompts"):
            refs += [(f"rl.{name}.{i}", p) for i, p in enumerate(getattr(self.rl, name) or [])]
        for path, pid in refs:
            if pid not in ids:
                raise ValueError(f"{path}: unknown prompt id {pid!r}")
        for name in ("fixed_prompts", "fixed_gains"):
            v = getattr(self.rl, name)
            if v is not None and len(v) != K:
                raise ValueError(f"rl.{name} must have {K} entries")
        if self.sweep_bep.t0 + self.sweep_bep.t1 > T_inf:
            raise ValueError("sweep_bep.t0 + sweep_bep.t1 exceeds inference_schedule.T")
        if max(self.sweep_steps.t0_values) + max(self.sweep_steps.t2_values) > T_inf:
            raise ValueError("sweep_steps step counts exceed inference_schedule.T")
        if min(self.sweep_steps.t0_values) < 0 or min(self.sweep_steps.t2_values) < 1:
            raise ValueError("sweep_steps needs t0 >= 0 and t2 >= 1")
        for path, idx in [("sweep_bep.persona", self.sweep_bep.persona)] + \
                [(f"sweep_steps.personas.{i}", p) for i, p in enumerate(self.sweep_steps.personas)]:
            if idx >= K:
                raise ValueError(f"{path}: persona index {idx} out of range for {K} personas")
        return self

    def prompt_ids(self) -> list:
        if self.world.prompts is not None:
            return [p.id for p in self.world.prompts]
        return [f"c{i:02d}" for i in range(self.world.ring_size)]


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def load_config(source=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a YAML file (path), a mapping, or defaults (None)."""
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        path = Path(source)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    data.update(overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)


# builders -------------------------------------------------------------------

def build_world(cfg: ExperimentConfig) -> semantics.PromptWorld:
    w = cfg.world
    if w.prompts is None:
        return semantics.default_world(w.ring_size, w.ring_radius, w.s0)
    prompts = tuple(semantics.PromptSpec(p.id, p.text or p.id, p.embedding) for p in w.prompts)
    return semantics.PromptWorld(w.d, w.s0, prompts)


def build_schedule(block: ScheduleBlock) -> diffusion.NoiseSchedule:
    return diffusion.build_schedule(block.T, block.beta_min, block.beta_max)


def build_personas(cfg: ExperimentConfig) -> tuple:
    return tuple(agents.Persona(p.open, p.consc, p.extra, p.agree, p.neuro)
                 for p in cfg.agents.personas)


def build_weights(cfg: ExperimentConfig) -> agents.QoEWeights:
    return agents.QoEWeights(**cfg.agents.weights.model_dump())


def build_budget(cfg: ExperimentConfig) -> channel.LinkBudget:
    c = cfg.channel
    return channel.LinkBudget(c.N0, c.p_min_dbw, c.p_max_dbw)


def build_energy(cfg: ExperimentConfig) -> distributed.EnergyModel:
    e = cfg.energy
    return distributed.EnergyModel(e.delta_0, tuple(e.delta_k), e.beta, e.E_T, tuple(e.E_Tk))


def build_env(cfg: ExperimentConfig) -> rl.EnvConfig:
    r = cfg.rl
    return rl.EnvConfig(
        world=build_world(cfg),
        schedule=build_schedule(cfg.inference_schedule),
        personas=build_personas(cfg),
        energy=build_energy(cfg),
        q_threshold=cfg.agents.q_threshold,
        lambdas=tuple(r.lambdas),
        T_s=r.T_s,
        T_e=r.T_e,
        budget=build_budget(cfg),
        fading=channel.FadingParams(cfg.channel.m, cfg.channel.ms),
        codec=channel.FixedPointCodec(cfg.channel.R),
        weights=build_weights(cfg),
        deterministic=cfg.deterministic,
        prompt_pool=tuple(r.prompt_pool) if r.prompt_pool else None,
        fixed_prompts=tuple(r.fixed_prompts) if r.fixed_prompts else None,
        fixed_gains=tuple(r.fixed_gains) if r.fixed_gains else None,
        fixed_seed=r.fixed_seed,
    )


def build_trainer(cfg: ExperimentConfig, seed: int | None = None) -> rl.TrainerConfig:
    t = cfg.rl.trainer
    kw = t.model_dump()
    kw["actor_beta"] = tuple(kw["actor_beta"])
    return rl.TrainerConfig(seed=cfg.seed if seed is None else seed, **kw)


def build_binding(cfg: ExperimentConfig, seed: int = 0) -> agents.EvaluatorBinding:
    ev = cfg.agents.evaluator
    return agents.EvaluatorBinding(ev.mode, tuple(ev.endpoint) if ev.endpoint else None,
                                   cfg.deterministic, seed, ev.timeout, ev.retries)
