import json
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distgdm.agents import (AGREEABLE, OPEN, PROTOCOL_VERSION, EvaluatorBinding, Persona,
                            QoEReport, QoEWeights, build_request, builtin_qoe, close_evaluators,
                            evaluate, parse_response, sum_qoe)
from distgdm.errors import ConfigError, EvaluatorError
from distgdm.semantics import default_world

WORLD = default_world()
DET = EvaluatorBinding(deterministic=True)
STUB = [sys.executable, "-m", "distgdm.evaluator_stub"]


@pytest.fixture(autouse=True)
def _close():
    yield
    close_evaluators()


def on_target(pid):
    return WORLD.get(pid).embedding.copy()


def test_persona_range():
    with pytest.raises(ConfigError):
        Persona(open=1.2)
    assert Persona.from_vector(OPEN.vector()) == OPEN


def test_on_target_neutral_score():
    rep = evaluate(WORLD, Persona(), "c03", "c03", on_target("c03"), DET)
    assert (rep.fidelity, rep.novelty, rep.artifact) == (1.0, 0.0, 0.0)
    assert rep.qoe == pytest.approx(0.7, abs=1e-15)


def test_agreeableness_raises_score():
    z = on_target("c03")
    hi = evaluate(WORLD, Persona(agree=1.0), "c03", "c03", z, DET).qoe
    lo = evaluate(WORLD, Persona(agree=0.0), "c03", "c03", z, DET).qoe
    assert hi >= lo


def test_far_latent_scores_near_zero():
    z = np.array([0.0, 5 * 2.0 + 2.0 + 1.0])  # at least 5 s_a from every ring point
    assert np.min(np.linalg.norm(WORLD.embeddings - z, axis=1)) >= 10.0
    assert evaluate(WORLD, Persona(), "c00", "c00", z, DET).qoe < 0.01


def test_novelty_sign_follows_openness():
    # a latent halfway between two prompts: open personas like the anchor's pull
    z = 0.5 * (on_target("c00") + on_target("c03"))
    w = QoEWeights()
    o = builtin_qoe(WORLD, Persona(open=1.0), "c03", "c00", z, w)
    c = builtin_qoe(WORLD, Persona(open=0.0), "c03", "c00", z, w)
    assert o.novelty > 0 and o.qoe > c.qoe


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5),
       st.floats(-20, 20), st.floats(-20, 20), st.integers(0, 49), st.integers(0, 49), st.integers(0, 10 ** 6))
def test_qoe_in_unit_interval(traits, x, y, own, anc, seed):
    rep = evaluate(WORLD, Persona.from_vector(traits), f"c{own:02d}", f"c{anc:02d}",
                   np.array([x, y]), EvaluatorBinding(seed=seed))
    assert 0.0 <= rep.qoe <= 1.0


def test_deterministic_evaluation_is_pure():
    z = np.array([0.3, 1.7])
    a = evaluate(WORLD, OPEN, "c05", "c00", z, DET)
    b = evaluate(WORLD, OPEN, "c05", "c00", z, DET)
    assert a == b


def test_sum_qoe():
    reps = [QoEReport(q, 0, 0, 0, 0) for q in (0.7, 0.2, 0.1)]
    assert sum_qoe(reps) == pytest.approx(1.0)
    assert sum_qoe(reps[:1]) == 0.7


def test_sum_matches_manual_evaluations():
    zs = [on_target("c01"), np.array([0.4, 0.4]), on_target("c30")]
    personas = [AGREEABLE, OPEN, Persona()]
    reps = [evaluate(WORLD, p, pid, "c01", z, DET) for p, pid, z in zip(personas, ("c01", "c10", "c30"), zs)]
    assert sum_qoe(reps) == sum(r.qoe for r in reps)


def test_high_fidelity_feedback_is_more_stable():
    rng = np.random.default_rng(0)
    target = on_target("c08")
    good, bad = [], []
    for s in range(200):
        b = EvaluatorBinding(seed=s)
        good.append(evaluate(WORLD, AGREEABLE, "c08", "c08", target + 0.1 * rng.normal(size=2), b).qoe)
        bad.append(evaluate(WORLD, AGREEABLE, "c08", "c08", target + 1.0 * rng.normal(size=2), b).qoe)
    assert np.std(good) < np.std(bad)


# ---------------------------------------------------------------- external protocol

def test_request_shape():
    req = build_request(WORLD, OPEN, "c01", "c00", np.array([0.1, 0.2]), np.zeros(8))
    assert req["version"] == PROTOCOL_VERSION
    assert req["own"] == {"id": "c01", "text": WORLD.get("c01").text}
    assert req["latent"] == [0.1, 0.2] and len(req["ambient"]) == 8
    json.dumps(req)


@pytest.mark.parametrize("line", [
    "not json", '{"version": 1}', '{"version": 2, "qoe": 0.5}', '{"version": 1, "qoe": 1.5}',
    '{"version": 1, "qoe": "high"}', '{"version": 1, "error": "boom"}',
])
def test_bad_responses_rejected(line):
    with pytest.raises(EvaluatorError):
        parse_response(line)


def test_echo_stub():
    b = EvaluatorBinding("external", tuple(STUB + ["echo", "0.42"]))
    assert evaluate(WORLD, OPEN, "c00", "c00", np.zeros(2), b).qoe == 0.42


def test_out_of_range_reply_rejected():
    b = EvaluatorBinding("external", tuple(STUB + ["echo", "1.5"]))
    with pytest.raises(EvaluatorError):
        evaluate(WORLD, OPEN, "c00", "c00", np.zeros(2), b)


def test_builtin_and_stub_agree():
    b = EvaluatorBinding("external", tuple(STUB + ["builtin"]))
    rng = np.random.default_rng(3)
    for persona in (AGREEABLE, OPEN, Persona()):
        for _ in range(5):
            z = rng.normal(size=2) * 2
            ext = evaluate(WORLD, persona, "c04", "c00", z, b).qoe
            ref = evaluate(WORLD, persona, "c04", "c00", z, DET).qoe
            assert abs(ext - ref) < 1e-9


def test_timeout_reports_retries():
    b = EvaluatorBinding("external", tuple(STUB + ["silent"]), timeout=0.3, retries=2)
    with pytest.raises(EvaluatorError) as err:
        evaluate(WORLD, OPEN, "c00", "c00", np.zeros(2), b)
    assert err.value.retries == 2


def test_stub_rejects_unknown_version():
    from distgdm.evaluator_stub import answer
    reply = answer({"version": 99}, "builtin", 0.5, WORLD, QoEWeights())
    assert "error" in reply
    with pytest.raises(EvaluatorError):
        parse_response(json.dumps(reply))
