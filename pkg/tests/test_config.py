import numpy as np
import pytest
import yaml

from distgdm import config as C
from distgdm.errors import ConfigError


def test_defaults_load_and_build():
    cfg = C.load_config()
    world = C.build_world(cfg)
    assert world.d == 2 and len(world) == 50
    env = C.build_env(cfg)
    assert env.K == 3 and env.state_dim == 29
    assert C.build_schedule(cfg.schedule).T == 50
    assert C.build_trainer(cfg, seed=4).seed == 4


def test_yaml_round_trip(tmp_path):
    cfg = C.load_config({"seed": 7, "channel": {"N0": 30.0}})
    path = tmp_path / "cfg.yaml"
    path.write_text(C.dump_config(cfg))
    again = C.load_config(path)
    assert again == cfg
    assert yaml.safe_load(path.read_text())["seed"] == 7


def test_overrides_merge_nested():
    cfg = C.load_config(None, {"rl": {"trainer": {"episodes": 12}}})
    assert cfg.rl.trainer.episodes == 12
    assert cfg.rl.trainer.batch_size == 64


@pytest.mark.parametrize("bad,field", [
    ({"world": {"d": 0}}, "world.d"),
    ({"schedule": {"beta_min": 0.3, "beta_max": 0.1}}, "schedule"),
    ({"channel": {"ms": 1.0}}, "channel.ms"),
    ({"agents": {"q_threshold": 2}}, "agents.q_threshold"),
    ({"rl": {"trainer": {"optimizer": "rmsprop"}}}, "rl.trainer.optimizer"),
    ({"unknown_block": 1}, "unknown_block"),
    ({"sweep_bep": {"prompt": "zz"}}, "sweep_bep"),
    ({"energy": {"delta_k": [1.0, 1.0]}}, "energy"),
])
def test_mutations_fail_with_field_path(bad, field):
    with pytest.raises(ConfigError) as err:
        C.load_config(bad)
    assert field in str(err.value)


def test_missing_file():
    with pytest.raises(ConfigError):
        C.load_config("/nonexistent/config.yaml")


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError):
        C.load_config(p)


def test_explicit_prompts():
    cfg = C.load_config({"world": {"prompts": [
        {"id": "a", "text": "apple", "embedding": [0.0, 1.0]},
        {"id": "b", "text": "boat", "embedding": [1.0, 0.0]},
    ]}, "rl": {"prompt_pool": ["a", "b"]}, "sweep_bep": {"prompt": "a"},
        "sweep_steps": {"anchor": "a", "device_prompt": "b"}, "sample": {"prompts": ["a", "b"]}})
    world = C.build_world(cfg)
    assert world.ids == ["a", "b"]
    np.testing.assert_array_equal(world.get("b").embedding, [1.0, 0.0])


def test_builders_follow_config():
    cfg = C.load_config({"agents": {"personas": [{"name": "x", "agree": 1.0}]},
                         "energy": {"delta_k": [2.0], "E_Tk": [5.0]},
                         "sweep_steps": {"personas": [0]}, "sweep_bep": {"persona": 0}})
    assert C.build_personas(cfg)[0].agree == 1.0
    assert C.build_energy(cfg).delta_k == (2.0,)
    assert C.build_env(cfg).K == 1
    assert C.build_binding(cfg, 3).seed == 3
