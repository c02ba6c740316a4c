"""Experiment configuration: one JSON document covering every section.

Required keys: network.rows, network.cols, flows.rate, advantage.mode,
trainer.episodes. Everything else has a default. Unknown keys are errors.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

from .advantage import MODES, AdvantageConfig
from .controllers import CLASSICAL
from .mdp import SCHEMAS, ObservationSchema
from .netmodel import DEFAULT_PHASE_KEYS, LinkTemplate, TrafficNetwork, build_grid_network, load_network
from .simcore import SimParams
from .tinynn import RMSPropConfig

DEFAULTS: dict[str, dict[str, Any]] = {
    "network": {
        "rows": None,
        "cols": None,
        "file": None,
        "phase_table": [list(p) for p in DEFAULT_PHASE_KEYS],
        "links": {
            "street": {"lanes": 3, "length_m": 200.0, "speed_limit_mps": 20.0},
            "avenue": {"lanes": 3, "length_m": 200.0, "speed_limit_mps": 40.0 / 3.6},
        },
    },
    "flows": {"rate": None},
    "sim": {"delta_t_s": 5, "yellow_s": 2, "saturation_flow": 1},
    "observation": {"schema": "cityflow", "wait_norm_s": 60.0, "include_pressure": False},
    "model": {"actor_hidden": [128, 128], "critic_hidden": [256, 256], "activation": "relu"},
    "advantage": {
        "mode": None,
        "gamma": 0.99,
        "delta": 0.95,
        "lambda": 0.95,
        "entropy_coef": 0.01,
        "entropy_final": 0.001,
        "reward_scale": 0.01,
    },
    "optimizer": {"lr": 1e-4, "decay": 0.99, "eps": 1e-5, "clip_norm": 40.0},
    "trainer": {
        "episodes": None,
        "workers": 8,
        "episode_len_steps": 720,
        "rollout_T": 40,
        "seed": 0,
        "deterministic": False,
        "eval_every": 50,
        "eval_seeds": [900001, 900002, 900003, 900004, 900005],
    },
    "controller": {"type": "policy", "plan": None},
}

REQUIRED = ("network.rows", "network.cols", "flows.rate", "advantage.mode", "trainer.episodes")
TRAIN_SEED_STRIDE = 100_000
THREADS_ENV = "SOCIALLIGHT_WORKERS"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))


def _merge(base: dict, over: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}.{k}" if path else k
        if k not in base:
            problems.append(f"unknown key {key!r}")
            continue
        if isinstance(base[k], dict) and k != "links":
            if not isinstance(v, dict):
                problems.append(f"{key!r} must be an object")
                continue
            out[k] = _merge(base[k], v, key, problems)
        else:
            out[k] = v
    return out


def _has(doc: dict, dotted: str) -> bool:
    cur = doc
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return False
        cur = cur[part]
    return True


def resolve(raw: dict, require: tuple[str, ...] = REQUIRED) -> dict:
    """Merge ``raw`` over defaults and validate; raises ConfigError listing every problem."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be an object"])
    for key in require:
        if not _has(raw, key):
            problems.append(f"missing required key {key!r}")
    doc = _merge(DEFAULTS, raw, "", problems)
    _validate(doc, problems)
    if problems:
        raise ConfigError(problems)
    return doc


def _validate(doc: dict, problems: list[str]) -> None:
    def check(cond, msg):
        if not cond:
            problems.append(msg)

    net = doc["network"]
    if net["file"] is None:
        for k in ("rows", "cols"):
            v = net[k]
            if v is not None:
                check(isinstance(v, int) and v >= 1, f"network.{k} must be a positive integer")
    rate = doc["flows"]["rate"]
    if rate is not None:
        if isinstance(rate, (int, float)):
            check(rate > 0, "flows.rate must be > 0")
        else:
            check(isinstance(rate, list) and all(isinstance(p, list) and len(p) == 2 for p in rate),
                  "flows.rate must be a number or a list of [start_s, rate] pairs")
    sim = doc["sim"]
    check(isinstance(sim["delta_t_s"], int) and sim["delta_t_s"] >= 1, "sim.delta_t_s must be a positive integer")
    dt, yellow = sim["delta_t_s"], sim["yellow_s"]
    check(isinstance(yellow, int) and isinstance(dt, int) and 0 <= yellow < dt,
          "sim.yellow_s must be an integer in [0, delta_t_s)")
    check(isinstance(sim["saturation_flow"], int) and sim["saturation_flow"] >= 1, "sim.saturation_flow must be a positive integer")
    obs = doc["observation"]
    check(obs["schema"] in SCHEMAS, f"observation.schema must be one of {SCHEMAS}")
    check(isinstance(obs["wait_norm_s"], (int, float)) and obs["wait_norm_s"] > 0, "observation.wait_norm_s must be > 0")
    model = doc["model"]
    for k in ("actor_hidden", "critic_hidden"):
        check(isinstance(model[k], list) and all(isinstance(w, int) and w >= 1 for w in model[k]),
              f"model.{k} must be a list of positive integers")
    check(model["activation"] in ("relu", "tanh"), "model.activation must be relu or tanh")
    adv = doc["advantage"]
    if adv["mode"] is not None:
        check(adv["mode"] in MODES, f"advantage.mode must be one of {MODES}")
    check(0 < adv["gamma"] <= 1, "advantage.gamma must lie in (0, 1]")
    check(0 <= adv["delta"] <= 1, "advantage.delta must lie in [0, 1]")
    check(0 <= adv["lambda"] <= 1, "advantage.lambda must lie in [0, 1]")
    check(adv["entropy_coef"] >= 0 and adv["entropy_final"] >= 0, "advantage entropy coefficients must be >= 0")
    check(adv["reward_scale"] > 0, "advantage.reward_scale must be > 0")
    opt = doc["optimizer"]
    check(opt["lr"] > 0, "optimizer.lr must be > 0")
    check(0 <= opt["decay"] < 1, "optimizer.decay must lie in [0, 1)")
    check(opt["eps"] > 0, "optimizer.eps must be > 0")
    check(opt["clip_norm"] >= 0, "optimizer.clip_norm must be >= 0")
    tr = doc["trainer"]
    if tr["episodes"] is not None:
        check(isinstance(tr["episodes"], int) and tr["episodes"] >= 0, "trainer.episodes must be a non-negative integer")
    check(isinstance(tr["workers"], int) and tr["workers"] >= 1, "trainer.workers must be >= 1")
    check(isinstance(tr["episode_len_steps"], int) and tr["episode_len_steps"] >= 1, "trainer.episode_len_steps must be >= 1")
    check(isinstance(tr["rollout_T"], int) and tr["rollout_T"] >= 1, "trainer.rollout_T must be >= 1")
    check(isinstance(tr["eval_every"], int) and tr["eval_every"] >= 0, "trainer.eval_every must be >= 0")
    check(isinstance(tr["eval_seeds"], list) and tr["eval_seeds"], "trainer.eval_seeds must be a non-empty list")
    if isinstance(tr["eval_seeds"], list) and isinstance(tr["episodes"], int) and isinstance(tr["seed"], int):
        train = training_seed_range(doc)
        clash = [s for s in tr["eval_seeds"] if train.start <= s < train.stop]
        check(not clash, f"evaluation seeds {clash} collide with training seeds")
    ctrl = doc["controller"]
    check(ctrl["type"] in ("policy",) + CLASSICAL, "controller.type must be policy or a classical controller")


def training_seed_range(doc: dict) -> range:
    base = doc["trainer"]["seed"] * TRAIN_SEED_STRIDE
    return range(base, base + max(doc["trainer"]["episodes"] or 0, 1))


def load_config(path, require: tuple[str, ...] = REQUIRED) -> dict:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON at line {e.lineno}: {e.msg}"]) from None
    return resolve(raw, require)


def dump_config(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def model_hash(doc: dict, net: TrafficNetwork) -> str:
    """Identity of everything a checkpoint's parameters are tied to."""
    blob = {"net": net.fingerprint(), "observation": doc["observation"], "model": doc["model"],
            "mode": doc["advantage"]["mode"]}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


# --- builders -------------------------------------------------------------------------


def build_network(doc: dict) -> TrafficNetwork:
    net = doc["network"]
    if net["file"]:
        return load_network(net["file"])
    links = {
        k: LinkTemplate(int(v["lanes"]), float(v["length_m"]), float(v["speed_limit_mps"]))
        for k, v in net["links"].items()
    }
    return build_grid_network(net["rows"], net["cols"], links, net["phase_table"])


def sim_params(doc: dict) -> SimParams:
    return SimParams(doc["sim"]["yellow_s"], doc["sim"]["saturation_flow"])


def observation_schema(doc: dict) -> ObservationSchema:
    o = doc["observation"]
    return ObservationSchema(o["schema"], float(o["wait_norm_s"]), bool(o["include_pressure"]))


def advantage_config(doc: dict) -> AdvantageConfig:
    a = doc["advantage"]
    return AdvantageConfig(a["gamma"], a["delta"], a["lambda"], a["mode"], a["entropy_coef"])


def rmsprop_config(doc: dict) -> RMSPropConfig:
    o = doc["optimizer"]
    return RMSPropConfig(o["lr"], o["decay"], o["eps"], o["clip_norm"])


def horizon_s(doc: dict) -> int:
    return doc["trainer"]["episode_len_steps"] * doc["sim"]["delta_t_s"]
