"""Phase-selection controllers. Each exposes ``actions(env) -> one phase id per agent``."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tinynn
from .netmodel import TrafficNetwork, phase_lane_incidence
from .simcore import pressure_of

# NS-straight, NS-left, EW-straight, EW-left for 30 s each
DEFAULT_FIXED_PLAN: tuple[tuple[int, float], ...] = ((0, 30.0), (1, 30.0), (2, 30.0), (3, 30.0))


def fixed_time_action(clock: float, plan: Sequence[tuple[int, float]]) -> int:
    if not plan:
        raise ValueError("fixed-time plan is empty")
    if any(d <= 0 for _, d in plan):
        raise ValueError("fixed-time plan durations must be > 0")
    cycle = sum(d for _, d in plan)
    pos = clock % cycle
    for phase, d in plan:
        if pos < d:
            return int(phase)
        pos -= d
    return int(plan[-1][0])  # float round-off at the cycle end


def _argmax_lowest(values) -> int:
    values = np.asarray(values, float)
    return int(np.flatnonzero(values == values.max())[0])


def greedy_action(incoming_queues, phase_lanes: Sequence[Sequence[int]]) -> int:
    """Phase whose movements carry the largest total incoming queue; ties to the lowest id.

    ``phase_lanes[p]`` lists positions into ``incoming_queues`` of the lanes
    phase p serves (see :func:`netmodel.phase_lane_incidence`).
    """
    q = np.asarray(incoming_queues, float)
    return _argmax_lowest([q[list(lanes)].sum() for lanes in phase_lanes])


def max_pressure_action(pressures) -> int:
    return _argmax_lowest(pressures)


def policy_action(theta: dict, spec: tinynn.MlpSpec, z_aug, mode: str, rng: Optional[np.random.Generator]) -> int:
    probs = tinynn.actor_forward(spec, theta, z_aug)
    return int(select_actions(probs[None], mode, rng)[0])


def select_actions(probs: np.ndarray, mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Row-wise sample (inverse CDF on one uniform per row) or argmax."""
    if mode == "argmax":
        return np.argmax(probs, axis=-1)
    if mode != "sample":
        raise ValueError(f"mode must be 'sample' or 'argmax', got {mode!r}")
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class FixedTimeController:
    name = "fixed_time"

    def __init__(self, plan: Sequence[tuple[int, float]] = DEFAULT_FIXED_PLAN):
        fixed_time_action(0.0, plan)
        self.plan = [(int(p), float(d)) for p, d in plan]

    def actions(self, env) -> list[int]:
        a = fixed_time_action(env.state.clock, self.plan)
        return [a] * env.num_agents


class GreedyController:
    name = "greedy"

    def __init__(self, net: TrafficNetwork):
        self.phase_lanes = [phase_lane_incidence(spec) for spec in net.intersections]

    def actions(self, env) -> list[int]:
        q = env.state.lane_queues
        out = []
        for spec, lanes in zip(env.net.intersections, self.phase_lanes):
            incoming = [len(q[l]) for l in spec.incoming_lanes]
            out.append(greedy_action(incoming, lanes))
        return out


class MaxPressureController:
    name = "max_pressure"

    def actions(self, env) -> list[int]:
        return [max_pressure_action(pressure_of(env.state, env.net, i)) for i in range(env.num_agents)]


class PolicyController:
    """Shared actor applied to every agent's augmented observation."""

    name = "policy"

    def __init__(self, spec: tinynn.MlpSpec, theta: dict, mode: str = "argmax", rng=None):
        self.spec, self.theta, self.mode, self.rng = spec, theta, mode, rng
        self._obs = None

    def observe(self, obs: np.ndarray) -> None:
        self._obs = obs

    def actions(self, env) -> list[int]:
        z = env.augmenter(self._obs)
        probs, _ = tinynn.forward(self.spec, self.theta, z)
        return [int(a) for a in select_actions(probs, self.mode, self.rng)]


def make_controller(kind: str, net: TrafficNetwork, plan=None):
    if kind == "fixed_time":
        return FixedTimeController(plan or DEFAULT_FIXED_PLAN)
    if kind == "greedy":
        return GreedyController(net)
    if kind == "max_pressure":
        return MaxPressureController()
    raise ValueError(f"unknown controller {kind!r}; choose fixed_time, greedy or max_pressure")


CLASSICAL = ("fixed_time", "greedy", "max_pressure")
