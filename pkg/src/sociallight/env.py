"""Simulator-agnostic environment interface and the grid-simulator backend."""
from __future__ import annotations

from typing import Callable, Protocol, Union

import numpy as np

from . import simcore
from .flows import FlowSpec
from .mdp import Augmenter, ObservationSchema, local_rewards, observe_all
from .netmodel import TrafficNetwork
from .simcore import SimParams, TrafficMetrics


class Environment(Protocol):
    net: TrafficNetwork

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, joint_action) -> tuple[np.ndarray, np.ndarray, TrafficMetrics, bool]: ...


FlowSource = Union[FlowSpec, Callable[[int], FlowSpec]]


class GridTrafficEnv:
    """Environment over :mod:`simcore`.

    ``reset(seed)`` returns the (N, width) observation matrix; ``step`` returns
    (observations, local rewards, step metrics, done). Rewards are taken at the
    decision boundary after the ``delta_t`` seconds have elapsed.
    """

    def __init__(
        self,
        net: TrafficNetwork,
        flows: FlowSource,
        episode_len_steps: int = 720,
        delta_t: int = 5,
        params: SimParams = SimParams(),
        schema: ObservationSchema = ObservationSchema(),
    ):
        if episode_len_steps < 1:
            raise ValueError("episode_len_steps must be >= 1")
        if params.yellow_s >= delta_t:
            raise ValueError("yellow time must be shorter than the control interval")
        self.net = net
        self.flows = flows
        self.episode_len_steps = episode_len_steps
        self.delta_t = delta_t
        self.params = params
        self.schema = schema
        self.augmenter = Augmenter(net)
        self.obs_width = schema.width(net)
        self.state = None
        self.t = 0

    @property
    def num_agents(self) -> int:
        return self.net.num_intersections

    @property
    def num_phases(self) -> int:
        return self.net.num_phases

    @property
    def horizon_s(self) -> int:
        return self.episode_len_steps * self.delta_t

    def reset(self, seed: int) -> np.ndarray:
        flows = self.flows(seed) if callable(self.flows) else self.flows
        self.state = simcore.reset(self.net, flows, seed, self.params)
        self.t = 0
        return observe_all(self.state, self.net, self.schema)

    def step(self, joint_action):
        if self.state is None:
            raise RuntimeError("call reset() first")
        if self.t >= self.episode_len_steps:
            raise RuntimeError("episode is over; call reset()")
        _, metrics = simcore.step(self.state, [int(a) for a in joint_action], self.delta_t)
        self.t += 1
        obs = observe_all(self.state, self.net, self.schema)
        rewards = local_rewards(self.state, self.net)
        return obs, rewards, metrics, self.t >= self.episode_len_steps

    def episode_metrics(self) -> TrafficMetrics:
        return self.state.episode_metrics()
