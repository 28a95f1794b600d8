"""Persona-conditioned QoE scoring.

The builtin scorer is a closed-form stand-in for a generative agent judging an
image.  It rewards closeness to the user's own prompt (fidelity), rewards or
penalises traces of the anchor prompt depending on openness (novelty), and
penalises outputs that match no known prompt at all (artifacts):

    f = exp(-|z - tau_own|^2 / (2 s_q^2))
    x = exp(-|z - tau_anchor|^2 / (2 s_q^2))      (0 when anchor == own)
    a = 1 - exp(-min_c |z - tau_c|^2 / (2 s_a^2))
    qoe = clamp01((0.6 + 0.2 agree) f + 0.3 (2 open - 1) x
                  - (0.4 + 0.3 neuro + 0.2 consc) a + xi)
    xi ~ N(0, (0.03 (1 - 0.5 extra))^2), zero in deterministic mode

An external evaluator can replace the builtin one.  It runs as a child process
that reads one JSON request per line on stdin and answers with one JSON line
on stdout (see ``PROTOCOL_VERSION`` and :func:`build_request`).
"""
from __future__ import annotations

import json
import queue
import subprocess
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, EvaluatorError
from .rng import substream
from .semantics import PromptWorld

PROTOCOL_VERSION = 1
TRAITS = ("open", "consc", "extra", "agree", "neuro")


@dataclass(frozen=True)
class Persona:
    """Big-Five trait vector, each trait in [0, 1]."""

    open: float = 0.5
    consc: float = 0.5
    extra: float = 0.5
    agree: float = 0.5
    neuro: float = 0.5

    def __post_init__(self):
        for name in TRAITS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"persona trait {name}={v} outside [0, 1]")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TRAITS])

    @classmethod
    def from_vector(cls, v):
        return cls(*map(float, v))


# Default personas: an agreeable, conscientious user and an open, less
# agreeable one, plus a neutral third user for three-device runs.
AGREEABLE = Persona(open=0.1, consc=0.8, extra=0.7, agree=0.9, neuro=0.1)
OPEN = Persona(open=0.9, consc=0.2, extra=0.1, agree=0.1, neuro=0.5)
NEUTRAL = Persona()
DEFAULT_PERSONAS = (AGREEABLE, OPEN, NEUTRAL)


@dataclass(frozen=True)
class QoEWeights:
    fidelity: float = 0.6
    fidelity_agree: float = 0.2
    novelty: float = 0.3
    artifact: float = 0.4
    artifact_neuro: float = 0.3
    artifact_consc: float = 0.2
    jitter: float = 0.03
    jitter_extra: float = 0.5
    s_q: float = 1.0
    s_a: float = 2.0

    def __post_init__(self):
        if not (self.s_q > 0 and self.s_a > 0):
            raise ConfigError("QoE length scales s_q and s_a must be positive")


@dataclass(frozen=True)
class QoEReport:
    qoe: float
    fidelity: float
    novelty: float
    artifact: float
    jitter: float


@dataclass(frozen=True)
class EvaluatorBinding:
    """Which scorer to use.  External mode needs a command line to launch."""

    mode: str = "builtin"
    endpoint: tuple | None = None
    deterministic: bool = False
    seed: int = 0
    timeout: float = 10.0
    retries: int = 3

    def __post_init__(self):
        if self.mode not in ("builtin", "external"):
            raise ConfigError(f"unknown evaluator mode {self.mode!r}")
        if self.mode == "external" and not self.endpoint:
            raise ConfigError("external evaluator mode requires an endpoint command")


def builtin_qoe(world: PromptWorld, persona: Persona, own, anchor, z, weights: QoEWeights,
                xi: float = 0.0) -> QoEReport:
    z = np.asarray(z, dtype=np.float64)
    own_p, anc_p = world.get(own), world.get(anchor)
    d_own = float(np.sum((z - own_p.embedding) ** 2))
    f = np.exp(-d_own / (2 * weights.s_q ** 2))
    if anc_p.id != own_p.id:
        x = np.exp(-float(np.sum((z - anc_p.embedding) ** 2)) / (2 * weights.s_q ** 2))
    else:
        x = 0.0
    d_min = float(np.min(np.sum((world.embeddings - z) ** 2, axis=1)))
    a = 1.0 - np.exp(-d_min / (2 * weights.s_a ** 2))
    raw = ((weights.fidelity + weights.fidelity_agree * persona.agree) * f
           + weights.novelty * (2 * persona.open - 1) * x
           - (weights.artifact + weights.artifact_neuro * persona.neuro
              + weights.artifact_consc * persona.consc) * a
           + xi)
    return QoEReport(float(min(1.0, max(0.0, raw))), float(f), float(x), float(a), float(xi))


def jitter_std(persona: Persona, weights: QoEWeights) -> float:
    return weights.jitter * (1.0 - weights.jitter_extra * persona.extra)


def evaluate(world: PromptWorld, persona: Persona, own_prompt, anchor_prompt, z_final,
             binding: EvaluatorBinding = EvaluatorBinding(), weights: QoEWeights = QoEWeights(),
             rng=None, ambient=None) -> QoEReport:
    """Score one final latent for one persona."""
    if binding.mode == "external":
        req = build_request(world, persona, own_prompt, anchor_prompt, z_final, ambient)
        return external_evaluate(binding, req)
    xi = 0.0
    if not binding.deterministic:
        rng = rng if rng is not None else substream(binding.seed, "qoe")
        xi = float(rng.normal(0.0, jitter_std(persona, weights)))
    return builtin_qoe(world, persona, own_prompt, anchor_prompt, z_final, weights, xi)


def sum_qoe(reports) -> float:
    reports = list(reports)
    if not reports:
        raise ValueError("sum_qoe needs at least one report")
    return float(sum(r.qoe for r in reports))


# external protocol ----------------------------------------------------------

def build_request(world, persona, own, anchor, z, ambient=None) -> dict:
    own_p, anc_p = world.get(own), world.get(anchor)
    z = np.asarray(z, dtype=np.float64)
    return {
        "version": PROTOCOL_VERSION,
        "persona": asdict(persona),
        "own": {"id": own_p.id, "text": own_p.text},
        "anchor": {"id": anc_p.id, "text": anc_p.text},
        "latent": [float(v) for v in z.reshape(-1)],
        "ambient": [] if ambient is None else [float(v) for v in np.ravel(ambient)],
    }


def parse_response(line: str) -> float:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EvaluatorError(f"malformed evaluator response: {line.strip()[:80]!r}") from exc
    if not isinstance(msg, dict) or msg.get("version") != PROTOCOL_VERSION:
        raise EvaluatorError(f"unsupported protocol version in response: {msg!r:.80}")
    if "error" in msg:
        raise EvaluatorError(f"evaluator reported error: {msg['error']}")
    qoe = msg.get("qoe")
    if not isinstance(qoe, (int, float)) or isinstance(qoe, bool) or not np.isfinite(qoe):
        raise EvaluatorError(f"evaluator response lacks a numeric qoe: {msg!r:.80}")
    if not 0.0 <= qoe <= 1.0:
        raise EvaluatorError(f"evaluator qoe {qoe} outside [0, 1]")
    return float(qoe)


class ExternalEvaluator:
    """Child process speaking the line protocol over stdin/stdout."""

    def __init__(self, command, timeout: float = 10.0, retries: int = 3):
        self.command = list(command)
        self.timeout = timeout
        self.retries = retries
        self.proc = None
        self._lines = None

    def _start(self):
        self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self.proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc, lines):
        for line in proc.stdout:
            lines.put(line)
        lines.put(None)

    def close(self):
        if self.proc is not None:
            try:
                self.proc.kill()
                self.proc.wait(timeout=5)
            except Exception:  # pragma: no cover - best effort
                pass
            self.proc = None

    def request(self, payload: dict) -> float:
        line = json.dumps(payload) + "\n"
        for attempt in range(self.retries):
            if self.proc is None or self.proc.poll() is not None:
                self._start()
            try:
                self.proc.stdin.write(line)
                self.proc.stdin.flush()
                reply = self._lines.get(timeout=self.timeout)
            except (queue.Empty, BrokenPipeError, OSError):
                reply = None
            if reply is None:  # timeout or the child exited: restart and retry
                self.close()
                continue
            return parse_response(reply)
        raise EvaluatorError("external evaluator did not answer", retries=self.retries)


_EVALUATORS: dict = {}


def external_evaluate(binding: EvaluatorBinding, request: dict) -> QoEReport:
    key = (tuple(binding.endpoint), binding.timeout, binding.retries)
    ev = _EVALUATORS.get(key)
    if ev is None:
        ev = _EVALUATORS[key] = ExternalEvaluator(binding.endpoint, binding.timeout, binding.retries)
    qoe = ev.request(request)
    nan = float("nan")
    return QoEReport(qoe, nan, nan, nan, 0.0)


def close_evaluators():
    for ev in _EVALUATORS.values():
        ev.close()
    _EVALUATORS.clear()
