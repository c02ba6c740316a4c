"""Counterfactual advantages, critic targets and losses.

Arrays are time-major. Every function taking a rollout accepts shape (T,) or
(T, N) for per-step scalars and (T, A) / (T, N, A) for per-step vectors, so a
whole multi-agent rollout can be processed in one call.

The bootstrap value at the end of a rollout is the counterfactual baseline
<pi_T, Q_T> for truncated rollouts and 0 for terminal ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

MODES = ("sociallight", "raw_coma", "a3c_local", "a3c_neighborhood")


@dataclass(frozen=True)
class AdvantageConfig:
    gamma: float = 0.99
    delta: float = 0.95
    lam: float = 0.95
    mode: str = "sociallight"
    entropy_coef: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")

    @property
    def uses_q_critic(self) -> bool:
        return self.mode in ("sociallight", "raw_coma")

    @property
    def uses_neighborhood_reward(self) -> bool:
        return self.mode != "a3c_local"


@dataclass
class AdvantageResult:
    advantages: np.ndarray
    targets: np.ndarray
    baselines: np.ndarray


# --- single-step forms -----------------------------------------------------------------


def counterfactual_baseline(q_vec, pi_vec) -> float:
    q_vec, pi_vec = np.asarray(q_vec, float), np.asarray(pi_vec, float)
    if q_vec.shape != pi_vec.shape:
        raise ValueError(f"length mismatch: Q has {q_vec.shape}, pi has {pi_vec.shape}")
    return float(pi_vec @ q_vec)


def coma_advantage(q_vec, pi_vec, a: int) -> float:
    q_vec = np.asarray(q_vec, float)
    if not 0 <= a < len(q_vec):
        raise IndexError(f"action {a} out of range for {len(q_vec)} phases")
    return float(q_vec[a] - counterfactual_baseline(q_vec, pi_vec))


def td1_cf_advantage(r, q_t, pi_t, q_next, pi_next, gamma: float, terminal: bool = False) -> float:
    """r + gamma*<pi',Q'> - <pi,Q>: the bootstrap is the next state's counterfactual baseline."""
    future = 0.0 if terminal else counterfactual_baseline(q_next, pi_next)
    return float(r + gamma * future - counterfactual_baseline(q_t, pi_t))


def nstep_cf_advantage(rewards, q_t, pi_t, q_tn, pi_tn, gamma: float, n: int) -> float:
    """sum_{l<n} gamma^l r_{t+l} + gamma^n <pi_{t+n},Q_{t+n}> - <pi_t,Q_t>.

    Pass ``q_tn=None`` for a terminal state at t+n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rewards = np.asarray(rewards, float)
    if len(rewards) < n:
        raise ValueError(f"need {n} rewards, got {len(rewards)}")
    ret = sum(gamma ** l * rewards[l] for l in range(n))
    tail = 0.0 if q_tn is None else counterfactual_baseline(q_tn, pi_tn)
    return float(ret + gamma ** n * tail - counterfactual_baseline(q_t, pi_t))


# --- rollout forms ---------------------------------------------------------------------


def baselines(q: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """<pi, Q> along the last axis."""
    return np.einsum("...a,...a->...", q, pi)


def _next_values(values: np.ndarray, bootstrap_value) -> np.ndarray:
    """values shifted one step forward with the bootstrap appended."""
    boot = np.zeros_like(values[0]) if bootstrap_value is None else np.asarray(bootstrap_value, float)
    return np.concatenate([values[1:], boot[None]], axis=0)


def _bootstrap_baseline(bootstrap, terminal: bool):
    if terminal:
        return None
    if bootstrap is None:
        raise ValueError("truncated rollout requires a bootstrap (Q_T, pi_T)")
    q_T, pi_T = bootstrap
    return baselines(np.asarray(q_T, float), np.asarray(pi_T, float))


def discounted_backward(x: np.ndarray, factor: float) -> np.ndarray:
    """y_t = x_t + factor * y_{t+1}, y_T = 0."""
    out = np.empty_like(x, dtype=float)
    acc = np.zeros_like(x[0], dtype=float)
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + factor * acc
        out[t] = acc
    return out


def td1_cf_residuals(rewards, q, pi, bootstrap, gamma: float, terminal: bool) -> np.ndarray:
    """Per-step one-step counterfactual advantages over a rollout."""
    b = baselines(np.asarray(q, float), np.asarray(pi, float))
    b_next = _next_values(b, _bootstrap_baseline(bootstrap, terminal))
    return np.asarray(rewards, float) + gamma * b_next - b


def gae_cf_advantages(rewards, q, pi, bootstrap, gamma: float, delta: float, terminal: bool = False) -> np.ndarray:
    """A_t = sum_l (gamma*delta)^l A1_{t+l} via A_t = A1_t + gamma*delta*A_{t+1}."""
    res = td1_cf_residuals(rewards, q, pi, bootstrap, gamma, terminal)
    return discounted_backward(res, gamma * delta)


def td_lambda_from_values(rewards, values, bootstrap_value, gamma: float, lam: float) -> np.ndarray:
    """TD(lambda) targets with the last available n-step return absorbing the leftover weight.

    G_t = r_t + gamma*((1-lam)*v_{t+1} + lam*G_{t+1}), G_T = v_T.
    """
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    boot = np.zeros_like(values[0]) if bootstrap_value is None else np.asarray(bootstrap_value, float)
    T = len(rewards)
    out = np.empty_like(rewards)
    g_next = boot
    for t in range(T - 1, -1, -1):
        v_next = values[t + 1] if t + 1 < T else boot
        g = rewards[t] + gamma * ((1.0 - lam) * v_next + lam * g_next)
        out[t] = g
        g_next = g
    return out


def critic_target_td1(rewards, q, pi, bootstrap, gamma: float, terminal: bool = False) -> np.ndarray:
    """G_t = r_t + gamma * <pi_{t+1}, Q_{t+1}>."""
    b = baselines(np.asarray(q, float), np.asarray(pi, float))
    b_next = _next_values(b, _bootstrap_baseline(bootstrap, terminal))
    return np.asarray(rewards, float) + gamma * b_next


def critic_targets_td_lambda(rewards, q, pi, bootstrap, gamma: float, lam: float, terminal: bool = False) -> np.ndarray:
    b = baselines(np.asarray(q, float), np.asarray(pi, float))
    return td_lambda_from_values(rewards, b, _bootstrap_baseline(bootstrap, terminal), gamma, lam)


# --- losses -----------------------------------------------------------------------------


def critic_loss(q_vecs, actions, targets, normalizer: Optional[float] = None) -> tuple[float, np.ndarray]:
    """mean_t (Q_t[a_t] - G_t)^2 and its gradient w.r.t. Q (non-zero only at taken actions).

    Leading axes of ``q_vecs`` are flattened; ``normalizer`` defaults to their count.
    """
    q = np.asarray(q_vecs, float)
    a = np.asarray(actions, int)
    g = np.asarray(targets, float)
    flat_q = q.reshape(-1, q.shape[-1])
    flat_a, flat_g = a.reshape(-1), g.reshape(-1)
    n = normalizer if normalizer is not None else len(flat_a)
    rows = np.arange(len(flat_a))
    err = flat_q[rows, flat_a] - flat_g
    loss = float(np.sum(err * err) / n)
    grad = np.zeros_like(flat_q)
    grad[rows, flat_a] = 2.0 * err / n
    return loss, grad.reshape(q.shape)


def value_loss(values, targets, normalizer: Optional[float] = None) -> tuple[float, np.ndarray]:
    v = np.asarray(values, float)
    err = v - np.asarray(targets, float)
    n = normalizer if normalizer is not None else err.size
    return float(np.sum(err * err) / n), 2.0 * err / n


def entropy(pi) -> np.ndarray:
    pi = np.asarray(pi, float)
    return -np.sum(pi * np.log(pi), axis=-1)


def policy_loss(pi_vecs, actions, advantages, entropy_coef: float = 0.0,
                normalizer: float = 1.0) -> tuple[float, np.ndarray]:
    """-sum_t log pi_t(a_t) A_t - c * sum_t H(pi_t), divided by ``normalizer``.

    Returns the loss and its gradient w.r.t. the softmax logits:
    A_t (pi_t - onehot(a_t)) + c pi_t (log pi_t + H_t). Advantages are constants.
    """
    pi = np.asarray(pi_vecs, float)
    flat_pi = pi.reshape(-1, pi.shape[-1])
    flat_a = np.asarray(actions, int).reshape(-1)
    flat_adv = np.asarray(advantages, float).reshape(-1)
    rows = np.arange(len(flat_a))
    p_taken = flat_pi[rows, flat_a]
    if np.any(p_taken <= 0.0):
        raise FloatingPointError("policy assigns zero probability to a taken action")
    logp = np.log(flat_pi)
    h = -np.sum(flat_pi * logp, axis=-1)
    loss = float((-np.sum(np.log(p_taken) * flat_adv) - entropy_coef * np.sum(h)) / normalizer)
    grad = flat_pi * flat_adv[:, None]
    grad[rows, flat_a] -= flat_adv
    grad += entropy_coef * flat_pi * (logp + h[:, None])
    return loss, (grad / normalizer).reshape(pi.shape)


# --- per-mode dispatch -----------------------------------------------------------------


@dataclass
class AgentRollout:
    """Per-agent (or per-batch) rollout view consumed by :func:`variant_advantages`.

    Q modes fill ``q``/``bootstrap_q``; A3C modes fill ``values``/``bootstrap_value``.
    """

    local_rewards: np.ndarray
    neighborhood_rewards: np.ndarray
    actions: np.ndarray
    pi: np.ndarray
    terminal: bool
    q: Optional[np.ndarray] = None
    bootstrap_q: Optional[np.ndarray] = None
    bootstrap_pi: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    bootstrap_value: Optional[np.ndarray] = None


def variant_advantages(mode: str, rollout: AgentRollout, config: AdvantageConfig) -> AdvantageResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    g = config.gamma
    r = rollout.local_rewards if mode == "a3c_local" else rollout.neighborhood_rewards
    r = np.asarray(r, float)
    if mode in ("sociallight", "raw_coma"):
        if rollout.q is None:
            raise ValueError(f"mode {mode} needs per-step Q vectors")
        boot = None if rollout.terminal else (rollout.bootstrap_q, rollout.bootstrap_pi)
        if not rollout.terminal and rollout.bootstrap_q is None:
            raise ValueError("truncated rollout requires bootstrap Q and pi")
        b = baselines(rollout.q, rollout.pi)
        if mode == "sociallight":
            adv = gae_cf_advantages(r, rollout.q, rollout.pi, boot, g, config.delta, rollout.terminal)
            tgt = critic_targets_td_lambda(r, rollout.q, rollout.pi, boot, g, config.lam, rollout.terminal)
        else:
            q_taken = np.take_along_axis(rollout.q, np.asarray(rollout.actions, int)[..., None], axis=-1)[..., 0]
            adv = q_taken - b
            tgt = critic_target_td1(r, rollout.q, rollout.pi, boot, g, rollout.terminal)
        return AdvantageResult(adv, tgt, b)
    if rollout.values is None:
        raise ValueError(f"mode {mode} needs per-step state values")
    v = np.asarray(rollout.values, float)
    if not rollout.terminal and rollout.bootstrap_value is None:
        raise ValueError("truncated rollout requires a bootstrap value")
    boot_v = None if rollout.terminal else np.asarray(rollout.bootstrap_value, float)
    v_next = _next_values(v, boot_v)
    res = r + g * v_next - v
    adv = discounted_backward(res, g * config.delta)
    tgt = td_lambda_from_values(r, v, boot_v, g, config.lam)
    return AdvantageResult(adv, tgt, v)
