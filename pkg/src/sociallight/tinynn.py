"""Dense networks with hand-written reverse mode, a shared parameter store and RMSProp.

Parameters are dicts of float64 arrays named ``W0, b0, W1, b1, ...``; ``Wk``
has shape (fan_in, fan_out) and inputs are row batches of shape (B, width).
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "linear")


@dataclass(frozen=True)
class MlpSpec:
    input_width: int
    hidden_layers: tuple[int, ...]
    activation: str
    output_width: int
    output_head: str

    def __post_init__(self):
        widths = (self.input_width, *self.hidden_layers, self.output_width)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.output_head not in HEADS:
            raise ValueError(f"output_head must be one of {HEADS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_width, *self.hidden_layers, self.output_width)

    @property
    def num_layers(self) -> int:
        return len(self.hidden_layers) + 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        w = self.widths
        out = {}
        for k in range(self.num_layers):
            out[f"W{k}"] = (w[k], w[k + 1])
            out[f"b{k}"] = (w[k + 1],)
        return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for name, shape in spec.shapes().items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    return (pre > 0.0).astype(pre.dtype) if name == "relu" else 1.0 - post * post


@dataclass
class ForwardCache:
    inputs: list  # activation entering each layer
    pre: list  # pre-activations of hidden layers
    head: np.ndarray  # final pre-activation (logits for a softmax head)


def forward(spec: MlpSpec, params: dict, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != spec.input_width:
        raise ValueError(f"input width {x.shape[-1]} does not match network input width {spec.input_width}")
    inputs, pre = [], []
    h = x
    last = spec.num_layers - 1
    for k in range(spec.num_layers):
        inputs.append(h)
        a = h @ params[f"W{k}"] + params[f"b{k}"]
        if k < last:
            pre.append(a)
            h = _act(spec.activation, a)
        else:
            head = a
    out = softmax(head) if spec.output_head == "softmax" else head
    cache = ForwardCache(inputs, pre, head)
    return (out[0] if squeeze else out), cache


def backprop(
    spec: MlpSpec,
    params: dict,
    x: Optional[np.ndarray],
    d_head: np.ndarray,
    cache: Optional[ForwardCache] = None,
) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter.

    ``d_head`` is dLoss/d(final pre-activation): the logits for a softmax head,
    the outputs for a linear head. Pass ``cache`` from :func:`forward` to skip
    recomputing the forward pass.
    """
    if cache is None:
        _, cache = forward(spec, params, x)
    g = np.asarray(d_head, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    grads = {}
    for k in range(spec.num_layers - 1, -1, -1):
        inp = cache.inputs[k]
        gw = inp.T @ g
        gb = g.sum(axis=0)
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise FloatingPointError(f"non-finite gradient in layer {k} (W{k}/b{k})")
        grads[f"W{k}"] = gw
        grads[f"b{k}"] = gb
        if k > 0:
            g = (g @ params[f"W{k}"].T) * _act_grad(spec.activation, cache.pre[k - 1], inp)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite intermediate gradient entering layer {k - 1}")
    return grads


# --- actor / critic ----------------------------------------------------------------


def actor_spec(z_width: int, num_phases: int, hidden=(128, 128), activation="relu") -> MlpSpec:
    return MlpSpec(z_width, tuple(hidden), activation, num_phases, "softmax")


def critic_spec(z_width: int, num_phases: int, hidden=(256, 256), activation="relu", value_head=False) -> MlpSpec:
    """Q-vector critic over z_aug + 4 one-hot neighbor actions, or a scalar value head over z_aug."""
    if value_head:
        return MlpSpec(z_width, tuple(hidden), activation, 1, "linear")
    return MlpSpec(z_width + 4 * num_phases, tuple(hidden), activation, num_phases, "linear")


def actor_forward(spec: MlpSpec, theta: dict, z_aug: np.ndarray) -> np.ndarray:
    probs, _ = forward(spec, theta, z_aug)
    return probs


def critic_forward(spec: MlpSpec, phi: dict, z_aug: np.ndarray, neighbor_onehot: np.ndarray) -> np.ndarray:
    x = np.concatenate([np.asarray(z_aug, float), np.asarray(neighbor_onehot, float)], axis=-1)
    q, _ = forward(spec, phi, x)
    return q


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# --- shared parameters ---------------------------------------------------------------


@dataclass(frozen=True)
class RMSPropConfig:
    lr: float = 1e-4
    decay: float = 0.99
    eps: float = 1e-5
    clip_norm: float = 40.0


@dataclass(frozen=True)
class Snapshot:
    actor: dict
    critic: dict
    version: int


class ParameterStore:
    """Actor and critic parameters shared by every agent and worker.

    Reads return deep copies taken under the lock, so a reader never sees a
    half-applied update. Applies are serialized by the same lock.
    """

    def __init__(self, actor: dict, critic: dict, hyper: RMSPropConfig = RMSPropConfig()):
        self.actor = {k: np.array(v, dtype=float) for k, v in actor.items()}
        self.critic = {k: np.array(v, dtype=float) for k, v in critic.items()}
        self.hyper = hyper
        self.ms = {"actor": zeros_like_params(self.actor), "critic": zeros_like_params(self.critic)}
        self.version = 0
        self._lock = threading.Lock()

    def snapshot(self) -> Snapshot:
        with self._lock:
            return Snapshot(
                {k: v.copy() for k, v in self.actor.items()},
                {k: v.copy() for k, v in self.critic.items()},
                self.version,
            )

    def apply(self, actor_grads: dict, critic_grads: dict, lr: Optional[float] = None) -> int:
        for name, grads, params in (("actor", actor_grads, self.actor), ("critic", critic_grads, self.critic)):
            for k, p in params.items():
                g = grads.get(k)
                if g is None or g.shape != p.shape:
                    raise ValueError(f"{name} gradient {k}: shape mismatch "
                                     f"({None if g is None else g.shape} vs {p.shape})")
                if not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"{name} gradient {k} is not finite")
        with self._lock:
            for name, grads, params in (("actor", actor_grads, self.actor), ("critic", critic_grads, self.critic)):
                rmsprop_update(params, self.ms[name], grads, self.hyper, lr)
            self.version += 1
            return self.version

    def __getstate__(self):
        d = self.__dict__.copy()
        d.pop("_lock")
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._lock = threading.Lock()


def clip_by_norm(grads: dict, threshold: float) -> dict:
    norm = grad_norm(grads)
    if threshold and norm > threshold:
        scale = threshold / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def rmsprop_update(params: dict, ms: dict, grads: dict, hyper: RMSPropConfig, lr: Optional[float] = None) -> None:
    """In place: ms <- decay*ms + (1-decay)*g^2;  p <- p - lr*g/sqrt(ms + eps), after norm clipping."""
    lr = hyper.lr if lr is None else lr
    grads = clip_by_norm(grads, hyper.clip_norm)
    for k, g in grads.items():
        m = ms[k]
        m *= hyper.decay
        m += (1.0 - hyper.decay) * g * g
        params[k] -= lr * g / np.sqrt(m + hyper.eps)


def optimizer_apply(store: ParameterStore, gradients: tuple[dict, dict], hyperparams: Optional[RMSPropConfig] = None) -> ParameterStore:
    if hyperparams is not None:
        store.hyper = hyperparams
    store.apply(*gradients)
    return store


# --- checkpoint container ------------------------------------------------------------

_MAGIC = b"SLCKPT01"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Deterministic binary container: magic, header length, JSON header, raw little-endian float64."""
    names = sorted(arrays)
    entries, blobs, offset = [], [], 0
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        b = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = json.dumps({"format": 1, "arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(float)
    return arrays, header["meta"]


def store_arrays(store: ParameterStore) -> dict[str, np.ndarray]:
    out = {}
    for k, v in store.actor.items():
        out[f"actor/{k}"] = v
    for k, v in store.critic.items():
        out[f"critic/{k}"] = v
    for net in ("actor", "critic"):
        for k, v in store.ms[net].items():
            out[f"opt/{net}/{k}"] = v
    return out


def restore_store(arrays: dict, hyper: RMSPropConfig, version: int) -> ParameterStore:
    actor = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("actor/")}
    critic = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("critic/")}
    store = ParameterStore(actor, critic, hyper)
    for net in ("actor", "critic"):
        for k in store.ms[net]:
            store.ms[net][k] = arrays[f"opt/{net}/{k}"].copy()
    store.version = version
    return store


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()[:16]
