"""Independent reference computations used as test oracles.

Nothing here calls into the package's advantage or backprop code: these are
direct summations and finite differences written from the definitions.
"""
from __future__ import annotations

import numpy as np

from sociallight import tinynn

FD_EPS = 1e-5


def rel_error(a, b, floor=1e-10):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_gradients(loss_fn, params: dict, eps: float = FD_EPS) -> dict:
    """Central differences of ``loss_fn(params)`` for every scalar parameter."""
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = loss_fn(params)
            flat[j] = orig - eps
            lo = loss_fn(params)
            flat[j] = orig
            gf[j] = (hi - lo) / (2 * eps)
        out[k] = g
    return out


def random_spec(rng, head: str) -> tinynn.MlpSpec:
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(w) for w in rng.integers(2, 7, size=depth))
    act = ["relu", "tanh"][int(rng.integers(0, 2))]
    out = int(rng.integers(2, 6)) if head == "softmax" else int(rng.integers(1, 6))
    return tinynn.MlpSpec(int(rng.integers(2, 8)), hidden, act, out, head)


def network_fd_case(rng, head: str):
    """A random spec, params, batch and linear readout; returns (analytic, numeric) gradient dicts."""
    spec = random_spec(rng, head)
    params = tinynn.init_params(spec, rng)
    for k in params:
        if k.startswith("b"):
            params[k] = rng.normal(scale=0.1, size=params[k].shape)
    x = rng.normal(size=(int(rng.integers(1, 4)), spec.input_width))
    w = rng.normal(size=(x.shape[0], spec.output_width))

    def loss(p):
        out, _ = tinynn.forward(spec, p, x)
        return float(np.sum(w * out))

    out, cache = tinynn.forward(spec, params, x)
    if head == "softmax":
        # d/dlogits of sum(w * softmax): p * (w - <p, w>)
        d_head = out * (w - np.sum(out * w, axis=1, keepdims=True))
    else:
        d_head = w
    analytic = tinynn.backprop(spec, params, x, d_head, cache)
    numeric = fd_gradients(loss, params)
    return analytic, numeric


# --- advantage oracles ---------------------------------------------------------------


def baseline(q, pi):
    return float(sum(p * v for p, v in zip(pi, q)))


def td1_direct(r, q, pi, q_boot, pi_boot, gamma, terminal):
    """One-step counterfactual advantages from first principles (loops, no vectorization)."""
    T = len(r)
    b = [baseline(q[t], pi[t]) for t in range(T)]
    b_end = 0.0 if terminal else baseline(q_boot, pi_boot)
    out = []
    for t in range(T):
        nxt = b[t + 1] if t + 1 < T else b_end
        out.append(r[t] + gamma * nxt - b[t])
    return np.array(out)


def gae_direct(res, gamma, delta):
    """A_t = sum_{l} (gamma*delta)^l res_{t+l} by explicit double sum."""
    T = len(res)
    return np.array([sum((gamma * delta) ** l * res[t + l] for l in range(T - t)) for t in range(T)])


def nstep_return(r, values, v_end, gamma, t, n):
    """sum_{l<n} gamma^l r_{t+l} + gamma^n v_{t+n}; v at index T is ``v_end``."""
    T = len(r)
    g = sum(gamma ** l * r[t + l] for l in range(n))
    v = values[t + n] if t + n < T else v_end
    return g + gamma ** n * v


def td_lambda_direct(r, values, v_end, gamma, lam):
    """(1-lam) * sum lam^{n-1} G^{t:t+n}, the last available n-step return taking the leftover weight."""
    T = len(r)
    out = []
    for t in range(T):
        N = T - t
        g = 0.0
        for n in range(1, N):
            g += (1 - lam) * lam ** (n - 1) * nstep_return(r, values, v_end, gamma, t, n)
        g += lam ** (N - 1) * nstep_return(r, values, v_end, gamma, t, N)
        out.append(g)
    return np.array(out)


def random_rollout(rng, T=None, A=None):
    T = int(rng.integers(1, 11)) if T is None else T
    A = int(rng.integers(2, 5)) if A is None else A
    return dict(
        r=rng.normal(size=T),
        q=rng.normal(size=(T, A)),
        pi=rng.dirichlet(np.ones(A), size=T),
        q_boot=rng.normal(size=A),
        pi_boot=rng.dirichlet(np.ones(A)),
        actions=rng.integers(0, A, size=T),
        terminal=bool(rng.integers(0, 2)),
    )
