"""Decentralized POMDP layer: observations, neighborhood augmentation, rewards, rollouts."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .netmodel import TrafficNetwork, neighbors_of
from .simcore import SimState, pressure_of

SCHEMAS = ("cityflow", "sumo")


@dataclass(frozen=True)
class ObservationSchema:
    name: str = "cityflow"
    wait_norm_s: float = 60.0
    include_pressure: bool = False

    def __post_init__(self):
        if self.name not in SCHEMAS:
            raise ValueError(f"unknown observation schema {self.name!r}; choose from {SCHEMAS}")
        if not self.wait_norm_s > 0:
            raise ValueError("wait_norm_s must be > 0")

    def width(self, net: TrafficNetwork) -> int:
        spec = net.intersections[0]
        w = net.num_phases + len(spec.incoming_lanes)
        if self.name == "sumo":
            w += len(spec.outgoing_lanes) + len(spec.incoming_lanes)
        if self.include_pressure:
            w += net.num_phases
        return w


@dataclass(frozen=True)
class Observation:
    phase_onehot: np.ndarray
    incoming_queues: np.ndarray
    outgoing_queues: Optional[np.ndarray] = None
    head_waits: Optional[np.ndarray] = None
    pressure: Optional[np.ndarray] = None

    def vector(self) -> np.ndarray:
        parts = [self.phase_onehot, self.incoming_queues]
        for extra in (self.outgoing_queues, self.head_waits, self.pressure):
            if extra is not None:
                parts.append(extra)
        return np.concatenate(parts).astype(float)


def observe(state: SimState, net: TrafficNetwork, i: int, schema: ObservationSchema = ObservationSchema()) -> Observation:
    spec = net.intersections[i]
    onehot = np.zeros(net.num_phases)
    onehot[state.agent_phase[i]] = 1.0
    q = state.lane_queues
    incoming = np.array([len(q[l]) for l in spec.incoming_lanes], dtype=float)
    outgoing = waits = pressure = None
    if schema.name == "sumo":
        outgoing = np.array([len(q[l]) for l in spec.outgoing_lanes], dtype=float)
        waits = np.minimum(
            np.array([state.head_wait(l) for l in spec.incoming_lanes], dtype=float) / schema.wait_norm_s, 1.0
        )
    if schema.include_pressure:
        pressure = np.array(pressure_of(state, net, i))
    return Observation(onehot, incoming, outgoing, waits, pressure)


def observe_all(state: SimState, net: TrafficNetwork, schema: ObservationSchema = ObservationSchema()) -> np.ndarray:
    """(N, width) matrix of observation vectors."""
    return np.stack([observe(state, net, i, schema).vector() for i in range(net.num_intersections)])


@dataclass(frozen=True)
class AugmentedObservation:
    self_obs: np.ndarray
    neighbor_slots: np.ndarray  # (4, width), zero rows for absent neighbors
    validity_mask: np.ndarray  # (4,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.self_obs, self.neighbor_slots.ravel(), self.validity_mask])


def augment(obs_all, net: TrafficNetwork, i: int) -> AugmentedObservation:
    """Self first, then N, E, S, W neighbor observations; absent slots are zero."""
    obs = np.asarray([o.vector() if isinstance(o, Observation) else o for o in obs_all], dtype=float)
    slots, mask = neighbors_of(net, i)
    nb = np.zeros((4, obs.shape[1]))
    for k, j in enumerate(slots):
        if j is not None:
            nb[k] = obs[j]
    return AugmentedObservation(obs[i].copy(), nb, np.array(mask, dtype=float))


class Augmenter:
    """Vectorized ``augment`` for every agent at once."""

    def __init__(self, net: TrafficNetwork):
        n = net.num_intersections
        self.n = n
        # index n points at an appended zero row
        self.index = np.array(
            [[i] + [j if j is not None else n for j in net.adjacency[i]] for i in range(n)], dtype=int
        )
        self.mask = np.array([[j is not None for j in net.adjacency[i]] for i in range(n)], dtype=float)

    def width(self, obs_width: int) -> int:
        return 5 * obs_width + 4

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        padded = np.vstack([obs, np.zeros((1, obs.shape[1]))])
        z = padded[self.index].reshape(self.n, -1)
        return np.hstack([z, self.mask])

    def neighbor_actions(self, actions: np.ndarray) -> np.ndarray:
        """(N, 4) neighbor actions in compass order, -1 for absent slots."""
        padded = np.append(actions, -1)
        return padded[self.index[:, 1:]]


def neighbor_action_onehot(nbr_actions: np.ndarray, num_phases: int) -> np.ndarray:
    """(..., 4) actions with -1 padding -> (..., 4*num_phases) one-hot rows, pad rows zero."""
    nbr_actions = np.asarray(nbr_actions)
    out = np.zeros(nbr_actions.shape + (num_phases,))
    valid = nbr_actions >= 0
    idx = np.nonzero(valid)
    out[idx + (nbr_actions[valid],)] = 1.0
    return out.reshape(nbr_actions.shape[:-1] + (4 * num_phases,))


def local_reward(state: SimState, net: TrafficNetwork, i: int) -> float:
    q = state.lane_queues
    return -float(sum(len(q[l]) for l in net.intersections[i].incoming_lanes))


def local_rewards(state: SimState, net: TrafficNetwork) -> np.ndarray:
    return np.array([local_reward(state, net, i) for i in range(net.num_intersections)])


def neighborhood_reward(local: Sequence[float], net: TrafficNetwork, i: int) -> float:
    slots, mask = neighbors_of(net, i)
    return float(local[i] + sum(local[j] for j, ok in zip(slots, mask) if ok))


def neighborhood_rewards(local: np.ndarray, augmenter: Augmenter) -> np.ndarray:
    padded = np.append(np.asarray(local, dtype=float), 0.0)
    return padded[augmenter.index].sum(axis=1)


# --- rollout storage ---------------------------------------------------------------


@dataclass(frozen=True)
class TransitionRecord:
    t: int
    z_aug: np.ndarray
    action: int
    neighbor_actions: np.ndarray
    policy_dist: np.ndarray
    critic_vec: np.ndarray
    local_reward: float
    neighborhood_reward: float


@dataclass
class Bootstrap:
    z_aug: np.ndarray  # (N, Wz)
    neighbor_actions: np.ndarray  # (N, 4)
    actions: np.ndarray  # (N,) actions that will be executed next
    policy: np.ndarray  # (N, A)
    critic: np.ndarray  # (N, A) or (N, 1)


@dataclass
class RolloutBuffer:
    """Time-major arrays for all agents: shapes (T, N, ...)."""

    z_aug: np.ndarray
    actions: np.ndarray
    neighbor_actions: np.ndarray
    policy: np.ndarray
    critic: np.ndarray
    local_reward: np.ndarray
    neighborhood_reward: np.ndarray
    bootstrap: Optional[Bootstrap]
    terminal: bool
    metrics: list

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def num_agents(self) -> int:
        return self.actions.shape[1]

    def __post_init__(self):
        if self.terminal == (self.bootstrap is not None):
            raise ValueError("bootstrap record must be present iff the rollout is truncated")
        if not np.allclose(self.policy.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("policy distributions must sum to 1")

    def records(self, i: int) -> Iterator[TransitionRecord]:
        for t in range(self.T):
            yield TransitionRecord(
                t,
                self.z_aug[t, i],
                int(self.actions[t, i]),
                self.neighbor_actions[t, i],
                self.policy[t, i],
                self.critic[t, i],
                float(self.local_reward[t, i]),
                float(self.neighborhood_reward[t, i]),
            )

    def duplicated(self) -> "RolloutBuffer":
        """Same data with every agent appearing twice (normalization checks)."""
        cat = lambda a: np.concatenate([a, a], axis=1)  # noqa: E731
        bs = None
        if self.bootstrap is not None:
            b = self.bootstrap
            c0 = lambda a: np.concatenate([a, a], axis=0)  # noqa: E731
            bs = Bootstrap(c0(b.z_aug), c0(b.neighbor_actions), c0(b.actions), c0(b.policy), c0(b.critic))
        return RolloutBuffer(
            cat(self.z_aug), cat(self.actions), cat(self.neighbor_actions), cat(self.policy), cat(self.critic),
            cat(self.local_reward), cat(self.neighborhood_reward), bs, self.terminal, self.metrics,
        )
