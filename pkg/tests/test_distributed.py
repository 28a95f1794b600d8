import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distgdm.channel import FixedBepChannel, IdealChannel
from distgdm.diffusion import OracleDenoiser, build_schedule, respace, reverse_step
from distgdm.distributed import (OUTCOME_FIELDS, EnergyModel, InferencePlan, check_constraints,
                                 energy_usage, outcome_rows, run_distributed)
from distgdm.errors import ConfigError, PlanError
from distgdm.rng import substream
from distgdm.semantics import default_world

WORLD = default_world()
BASE = build_schedule(50, 1e-4, 0.02)
ORACLE = OracleDenoiser(WORLD)


class Recorder:
    """Oracle denoiser that logs every (t, prompt) it is asked about."""

    def __init__(self):
        self.calls = []

    def eps(self, schedule, z, t, prompt):
        self.calls.append((t, prompt))
        return ORACLE.eps(schedule, z, t, prompt)


def plan(t0, tk, prompts=("c00",), anchor="c00", T=None, det=True, seed=0, powers=None):
    powers = powers or (1.0,) * len(prompts)
    T = T if T is not None else t0 + max(tk)
    return InferencePlan(anchor, tuple(prompts), t0, tuple(tk), powers, T, det, seed)


# ---------------------------------------------------------------- plans

@pytest.mark.parametrize("kw", [
    dict(t0=5, tk=(6,), T=10), dict(t0=-1, tk=(3,)), dict(t0=2, tk=(0,)),
    dict(t0=2, tk=(3,), powers=(-1.0,)),
])
def test_invalid_plans(kw):
    with pytest.raises(PlanError):
        plan(**kw)


def test_device_count_checked():
    with pytest.raises(PlanError):
        InferencePlan("c00", ("c00", "c01"), 2, (3,), (1.0, 1.0), 10)


def test_compact_plan_converts_powers():
    p = InferencePlan.compact("c00", ("c00", "c01"), 3, (4, 6), (10.0, 20.0))
    assert p.T == 9
    np.testing.assert_allclose(p.powers_w, (10.0, 100.0))
    np.testing.assert_allclose(p.powers_dbw, (10.0, 20.0))


# ---------------------------------------------------------------- step assignment

def test_step_assignment_matches_handoff():
    rec = Recorder()
    p = plan(4, (6, 6), prompts=("c00", "c07"), T=10)
    run_distributed(WORLD, BASE, rec, p, IdealChannel())
    assert rec.calls[:4] == [(t, "c00") for t in (10, 9, 8, 7)]
    assert rec.calls[4:10] == [(t, "c00") for t in range(6, 0, -1)]
    assert rec.calls[10:] == [(t, "c07") for t in range(6, 0, -1)]


def test_gap_runs_under_anchor_until_handoff():
    rec = Recorder()
    p = plan(2, (3,), prompts=("c05",), T=8)
    run_distributed(WORLD, BASE, rec, p, IdealChannel())
    assert rec.calls == [(t, "c00") for t in (8, 7, 6, 5, 4)] + [(t, "c05") for t in (3, 2, 1)]


def test_unequal_handoffs():
    rec = Recorder()
    p = plan(2, (3, 5), prompts=("c01", "c02"))
    run_distributed(WORLD, BASE, rec, p, IdealChannel())
    server = [c for c in rec.calls if c[1] == "c00"]
    assert server == [(7, "c00"), (6, "c00"), (5, "c00"), (4, "c00")]
    assert [c for c in rec.calls if c[1] == "c01"] == [(t, "c01") for t in (3, 2, 1)]


# ---------------------------------------------------------------- equivalences

def _unsplit(prompt, T, seed):
    sch = respace(BASE, T)
    z = substream(seed, "init").standard_normal(2)
    for t in range(T, 0, -1):
        z = reverse_step(sch, ORACLE, z, t, prompt, None, True)
    return z


def test_pure_local_generation():
    out = run_distributed(WORLD, BASE, ORACLE, plan(0, (10,), prompts=("c03",), anchor="c03"), IdealChannel())
    assert out.final[0].tobytes() == _unsplit("c03", 10, 0).tobytes()


def test_zero_bep_same_prompt_equals_unsplit():
    p = plan(4, (6,), prompts=("c00",))
    out = run_distributed(WORLD, BASE, ORACLE, p, IdealChannel())
    assert out.final[0].tobytes() == _unsplit("c00", 10, 0).tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 9), st.integers(0, 1000))
def test_split_point_invariance(t0, seed):
    out = run_distributed(WORLD, BASE, ORACLE, plan(t0, (10 - t0,), seed=seed, T=10), IdealChannel())
    ref = run_distributed(WORLD, BASE, ORACLE, plan(0, (10,), seed=seed, T=10), IdealChannel())
    assert out.final.tobytes() == ref.final.tobytes()


def test_contamination_monotonicity():
    anchor, own = WORLD.get("c00").embedding, WORLD.get("c06").embedding
    chan = FixedBepChannel((0.0,))

    def mean_dist(t0, tk, target):
        d = []
        for s in range(100):
            p = plan(t0, (tk,), prompts=("c06",), seed=s)
            d.append(np.linalg.norm(run_distributed(WORLD, BASE, ORACLE, p, chan).final[0] - target))
        return np.mean(d)

    to_anchor = [mean_dist(t0, 4, anchor) for t0 in (0, 2, 4, 8)]
    assert np.all(np.diff(to_anchor) <= 0)
    to_own = [mean_dist(4, tk, own) for tk in (1, 2, 4, 8)]
    assert np.all(np.diff(to_own) <= 0)


def test_channel_noise_is_per_device():
    p = plan(3, (4, 4), prompts=("c00", "c00"), det=True)
    out = run_distributed(WORLD, BASE, ORACLE, p, FixedBepChannel((0.0, 0.2)))
    assert out.flipped_bits[0] == 0 and out.flipped_bits[1] > 0
    np.testing.assert_array_equal(out.sent[0], out.sent[1])


def test_runs_are_seed_deterministic():
    p = plan(3, (4, 5), prompts=("c00", "c09"), det=False, seed=11)
    a = run_distributed(WORLD, BASE, ORACLE, p, FixedBepChannel((0.05, 0.05)))
    b = run_distributed(WORLD, BASE, ORACLE, p, FixedBepChannel((0.05, 0.05)))
    assert a.final.tobytes() == b.final.tobytes()


# ---------------------------------------------------------------- energy

def test_energy_examples():
    m = EnergyModel(delta_0=0.5, delta_k=(1.0, 1.0), beta=0.1, E_Tk=(8.0, 8.0))
    server, _ = energy_usage(plan(4, (5, 5), prompts=("c00", "c01"), powers=(10.0, 20.0)), m)
    assert server == pytest.approx(5.0)
    server, _ = energy_usage(plan(0, (5,), powers=(0.0,)), EnergyModel(delta_k=(1.0,), E_Tk=(8.0,)))
    assert server == 0.0
    _, dev = energy_usage(plan(0, (7,)), EnergyModel(delta_k=(1.0,), E_Tk=(8.0,)))
    assert dev[0] == 7.0 <= 8.0


def test_constraint_report():
    m = EnergyModel(delta_k=(1.0,), E_Tk=(8.0,))
    ok = check_constraints(plan(2, (7,)), m, [0.7], 0.6)
    assert not ok.any
    bad = check_constraints(plan(0, (9,)), m, [0.5], 0.6)
    assert bad.device_budget[0] == 1.0
    assert bad.qoe[0] == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        check_constraints(plan(0, (9,)), m, [0.5, 0.5], 0.6)


def test_outcome_ledger_matches_energy_usage():
    m = EnergyModel(delta_0=0.5, delta_k=(1.0, 2.0), beta=0.1, E_Tk=(8.0, 8.0))
    p = plan(3, (4, 5), prompts=("c00", "c01"), powers=(12.0, 30.0))
    out = run_distributed(WORLD, BASE, ORACLE, p, IdealChannel(), energy=m)
    server, dev = energy_usage(p, m)
    assert out.server_energy == server
    np.testing.assert_array_equal(out.device_compute, dev)
    rows = outcome_rows(p, out, [0.5, 0.6])
    assert len(rows) == 2 and set(rows[0]) == set(OUTCOME_FIELDS)
