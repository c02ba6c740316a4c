from __future__ import annotations

import json

import pytest

from sociallight import config as cfgmod
from sociallight.config import ConfigError, resolve

BASE = {"network": {"rows": 2, "cols": 2}, "flows": {"rate": 0.2}, "advantage": {"mode": "sociallight"},
        "trainer": {"episodes": 3}}


def test_minimal_document_resolves_with_defaults():
    doc = resolve(BASE)
    assert doc["sim"] == {"delta_t_s": 5, "yellow_s": 2, "saturation_flow": 1}
    assert doc["trainer"]["episode_len_steps"] == 720
    assert doc["trainer"]["workers"] == 8
    assert cfgmod.horizon_s(doc) == 3600


@pytest.mark.parametrize("key", cfgmod.REQUIRED)
def test_missing_key_is_named(key):
    raw = json.loads(json.dumps(BASE))
    section, name = key.split(".")
    del raw[section][name]
    with pytest.raises(ConfigError) as e:
        resolve(raw)
    assert repr(key) in str(e.value)


def test_every_problem_reported_at_once():
    raw = {"network": {"rows": 0}, "flows": {"rate": -1}, "advantage": {"mode": "nope", "gamma": 2.0},
           "trainer": {"episodes": 5, "bogus": 1}, "sim": {"yellow_s": 9}}
    with pytest.raises(ConfigError) as e:
        resolve(raw)
    text = "\n".join(e.value.problems)
    for needle in ("'network.cols'", "network.rows must", "flows.rate must", "advantage.mode must",
                   "advantage.gamma", "'trainer.bogus'", "sim.yellow_s"):
        assert needle in text
    assert len(e.value.problems) >= 7


def test_eval_seeds_must_avoid_training_seeds():
    raw = {**BASE, "trainer": {"episodes": 10, "seed": 0, "eval_seeds": [3, 900001]}}
    with pytest.raises(ConfigError, match=r"\[3\] collide"):
        resolve(raw)


def test_default_eval_seeds_disjoint_from_training_range():
    for seed in range(0, 9):
        doc = resolve({**BASE, "trainer": {"episodes": 1000, "seed": seed}})
        train = cfgmod.training_seed_range(doc)
        assert not set(doc["trainer"]["eval_seeds"]) & set(train)
    # seed 9 trains on 900000.. which overlaps the default evaluation seeds
    with pytest.raises(ConfigError, match="collide"):
        resolve({**BASE, "trainer": {"episodes": 1000, "seed": 9}})


def test_invalid_json_reported(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"network": ')
    with pytest.raises(ConfigError, match="invalid JSON"):
        cfgmod.load_config(p)


def test_dump_round_trip(tmp_path):
    doc = resolve(BASE)
    cfgmod.dump_config(doc, tmp_path / "c.json")
    assert cfgmod.load_config(tmp_path / "c.json") == doc
    assert cfgmod.config_hash(doc) == cfgmod.config_hash(resolve(BASE))


def test_model_hash_tracks_phase_table():
    doc = resolve(BASE)
    other = resolve({**BASE, "network": {**BASE["network"],
                                          "phase_table": list(reversed(doc["network"]["phase_table"]))}})
    h1 = cfgmod.model_hash(doc, cfgmod.build_network(doc))
    h2 = cfgmod.model_hash(other, cfgmod.build_network(other))
    assert h1 != h2
    # optimizer settings do not change what the parameters mean
    tweaked = resolve({**BASE, "optimizer": {"lr": 0.5}})
    assert cfgmod.model_hash(tweaked, cfgmod.build_network(tweaked)) == h1
