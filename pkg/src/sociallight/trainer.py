"""Rollout workers, gradient computation, A3C-style training and evaluation.

Every agent shares one actor and one critic. A worker owns a simulator
instance and an action-sampling RNG; the ParameterStore is the only object
workers share. In deterministic mode workers run round-robin in the calling
thread, so results depend only on the config. Otherwise each worker is a
thread that applies its gradients to the store as soon as they are ready.
"""
from __future__ import annotations

import json
import logging
import os
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import config as cfgmod
from . import tinynn
from .advantage import AgentRollout, AdvantageConfig, critic_loss, policy_loss, value_loss, variant_advantages
from .controllers import PolicyController, make_controller, select_actions
from .env import GridTrafficEnv
from .flows import FlowSpec, generate_flows
from .mdp import Bootstrap, RolloutBuffer, neighbor_action_onehot, neighborhood_rewards
from .netmodel import TrafficNetwork

log = logging.getLogger(__name__)

METRIC_KEYS = ("avg_queue_length", "avg_speed", "avg_intersection_delay", "avg_cumulative_delay", "avg_trip_time")


class TrainingFault(RuntimeError):
    pass


@dataclass(frozen=True)
class Models:
    actor: tinynn.MlpSpec
    critic: tinynn.MlpSpec
    q_critic: bool
    num_phases: int

    def critic_input(self, z: np.ndarray, nbr_actions: np.ndarray) -> np.ndarray:
        if not self.q_critic:
            return z
        return np.concatenate([z, neighbor_action_onehot(nbr_actions, self.num_phases)], axis=-1)


def build_models(doc: dict, net: TrafficNetwork) -> Models:
    schema = cfgmod.observation_schema(doc)
    z_width = 5 * schema.width(net) + 4
    m = doc["model"]
    q = doc["advantage"]["mode"] in ("sociallight", "raw_coma")
    return Models(
        tinynn.actor_spec(z_width, net.num_phases, m["actor_hidden"], m["activation"]),
        tinynn.critic_spec(z_width, net.num_phases, m["critic_hidden"], m["activation"], value_head=not q),
        q,
        net.num_phases,
    )


def init_store(doc: dict, models: Models) -> tinynn.ParameterStore:
    rng = np.random.default_rng([doc["trainer"]["seed"], 7])
    actor = tinynn.init_params(models.actor, rng)
    critic = tinynn.init_params(models.critic, rng)
    return tinynn.ParameterStore(actor, critic, cfgmod.rmsprop_config(doc))


def flow_factory(doc: dict, net: TrafficNetwork) -> Callable[[int], object]:
    rate = doc["flows"]["rate"]
    rate = rate if isinstance(rate, (int, float)) else [tuple(p) for p in rate]
    horizon = cfgmod.horizon_s(doc)
    return lambda seed: generate_flows(net, rate, horizon, seed)


def make_env(doc: dict, net: TrafficNetwork) -> GridTrafficEnv:
    return GridTrafficEnv(
        net,
        flow_factory(doc, net),
        doc["trainer"]["episode_len_steps"],
        doc["sim"]["delta_t_s"],
        cfgmod.sim_params(doc),
        cfgmod.observation_schema(doc),
    )


class Worker:
    """One simulator instance plus the bookkeeping needed to cut an episode into rollouts."""

    def __init__(self, wid: int, env: GridTrafficEnv, rng: np.random.Generator):
        self.wid = wid
        self.env = env
        self.rng = rng
        self.obs: Optional[np.ndarray] = None
        self.next_probs: Optional[np.ndarray] = None
        self.next_actions: Optional[np.ndarray] = None
        self.episode: Optional[int] = None
        self.episode_return = 0.0

    @property
    def mid_episode(self) -> bool:
        return self.obs is not None

    def start_episode(self, episode: int, flow_seed: int) -> None:
        self.obs = self.env.reset(flow_seed)
        self.next_probs = self.next_actions = None
        self.episode = episode
        self.episode_return = 0.0


def _critic_out(models: Models, phi: dict, z: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    out, _ = tinynn.forward(models.critic, phi, models.critic_input(z, nbr))
    return out


def run_rollout(worker: Worker, snap: tinynn.Snapshot, models: Models, T: int) -> RolloutBuffer:
    """Up to T control steps for every agent; stops early at the episode end."""
    env = worker.env
    if not worker.mid_episode:
        raise RuntimeError("worker has no active episode")
    aug = env.augmenter
    z = aug(worker.obs)
    if worker.next_actions is None:
        probs, _ = tinynn.forward(models.actor, snap.actor, z)
        actions = select_actions(probs, "sample", worker.rng)
    else:
        probs, actions = worker.next_probs, worker.next_actions
    zs, acts, nbrs, pis, crits, rl, rn, metrics = [], [], [], [], [], [], [], []
    done = False
    try:
        for _ in range(T):
            nbr = aug.neighbor_actions(actions)
            zs.append(z)
            acts.append(actions)
            nbrs.append(nbr)
            pis.append(probs)
            crits.append(_critic_out(models, snap.critic, z, nbr))
            obs, r_local, m, done = env.step(actions)
            rl.append(r_local)
            rn.append(neighborhood_rewards(r_local, aug))
            metrics.append(m)
            worker.episode_return += float(np.mean(r_local))
            z = aug(obs)
            probs, _ = tinynn.forward(models.actor, snap.actor, z)
            actions = select_actions(probs, "sample", worker.rng)
            worker.obs = obs
            if done:
                break
    except Exception as e:  # noqa: BLE001
        raise TrainingFault(f"worker {worker.wid}: simulator fault: {e}") from e
    bootstrap = None
    if done:
        worker.obs = None
        worker.next_probs = worker.next_actions = None
    else:
        nbr = aug.neighbor_actions(actions)
        bootstrap = Bootstrap(z, nbr, actions, probs, _critic_out(models, snap.critic, z, nbr))
        worker.next_probs, worker.next_actions = probs, actions
    return RolloutBuffer(
        z_aug=np.stack(zs),
        actions=np.stack(acts).astype(int),
        neighbor_actions=np.stack(nbrs).astype(int),
        policy=np.stack(pis),
        critic=np.stack(crits),
        local_reward=np.stack(rl),
        neighborhood_reward=np.stack(rn),
        bootstrap=bootstrap,
        terminal=done,
        metrics=metrics,
    )


@dataclass
class GradientInfo:
    policy_loss: float
    critic_loss: float
    mean_advantage: float
    entropy: float


def prepare_batch(buffer: RolloutBuffer, snap: tinynn.Snapshot, models: Models, adv_cfg: AdvantageConfig,
                  reward_scale: float):
    """Forward passes over the whole buffer plus per-mode advantages and critic targets."""
    T, N = buffer.actions.shape
    Z = buffer.z_aug.reshape(T * N, -1)
    probs, a_cache = tinynn.forward(models.actor, snap.actor, Z)
    X = models.critic_input(Z, buffer.neighbor_actions.reshape(T * N, 4))
    c_out, c_cache = tinynn.forward(models.critic, snap.critic, X)
    pi = probs.reshape(T, N, -1)
    ro = AgentRollout(
        local_rewards=buffer.local_reward * reward_scale,
        neighborhood_rewards=buffer.neighborhood_reward * reward_scale,
        actions=buffer.actions,
        pi=pi,
        terminal=buffer.terminal,
    )
    b = buffer.bootstrap
    if b is not None:
        boot_pi, _ = tinynn.forward(models.actor, snap.actor, b.z_aug)
        boot_c = _critic_out(models, snap.critic, b.z_aug, b.neighbor_actions)
    if models.q_critic:
        ro.q = c_out.reshape(T, N, -1)
        if b is not None:
            ro.bootstrap_q, ro.bootstrap_pi = boot_c, boot_pi
    else:
        ro.values = c_out.reshape(T, N)
        if b is not None:
            ro.bootstrap_value = boot_c[:, 0]
    res = variant_advantages(adv_cfg.mode, ro, adv_cfg)
    return dict(pi=pi, a_cache=a_cache, c_out=c_out, c_cache=c_cache, result=res, T=T, N=N)


def losses_from_batch(batch, buffer: RolloutBuffer, models: Models, entropy_coef: float):
    T, N = batch["T"], batch["N"]
    norm = float(N * T)
    res = batch["result"]
    p_loss, d_logits = policy_loss(batch["pi"], buffer.actions, res.advantages, entropy_coef, norm)
    if models.q_critic:
        c_loss, d_c = critic_loss(batch["c_out"].reshape(T, N, -1), buffer.actions, res.targets, norm)
        d_c = d_c.reshape(T * N, -1)
    else:
        c_loss, d_v = value_loss(batch["c_out"].reshape(T, N), res.targets, norm)
        d_c = d_v.reshape(T * N, 1)
    return p_loss, d_logits.reshape(T * N, -1), c_loss, d_c


def compute_gradients(buffer: RolloutBuffer, snap: tinynn.Snapshot, models: Models, adv_cfg: AdvantageConfig,
                      entropy_coef: float, reward_scale: float = 1.0):
    """Actor and critic gradients summed over agents and normalized by N*T."""
    batch = prepare_batch(buffer, snap, models, adv_cfg, reward_scale)
    p_loss, d_logits, c_loss, d_c = losses_from_batch(batch, buffer, models, entropy_coef)
    if not (np.isfinite(p_loss) and np.isfinite(c_loss)):
        raise TrainingFault(f"non-finite loss (policy {p_loss}, critic {c_loss}); {_diagnose(buffer, batch)}")
    g_actor = tinynn.backprop(models.actor, snap.actor, None, d_logits, batch["a_cache"])
    g_critic = tinynn.backprop(models.critic, snap.critic, None, d_c, batch["c_cache"])
    pi = batch["pi"]
    info = GradientInfo(p_loss, c_loss, float(np.mean(batch["result"].advantages)),
                        float(np.mean(-np.sum(pi * np.log(pi), axis=-1))))
    return g_actor, g_critic, info


def _diagnose(buffer: RolloutBuffer, batch) -> str:
    """Name the earliest offending (t, agent), checking inputs before derived quantities."""
    T, N = batch["T"], batch["N"]
    sources = (
        ("local_reward", buffer.local_reward),
        ("neighborhood_reward", buffer.neighborhood_reward),
        ("z_aug", buffer.z_aug),
        ("policy", batch["pi"]),
        ("critic", batch["c_out"].reshape(T, N, -1)),
        ("advantage", batch["result"].advantages),
        ("target", batch["result"].targets),
    )
    for name, arr in sources:
        arr = np.asarray(arr, float).reshape(T, N, -1)
        bad = np.argwhere(~np.isfinite(arr).all(axis=-1))
        if len(bad):
            t, i = (int(v) for v in bad[0])
            return f"first bad {name} at (t, agent) = ({t}, {i}): {arr[t, i].tolist()}"
    return "no non-finite input found"


# --- evaluation ---------------------------------------------------------------------


def run_episode(env: GridTrafficEnv, controller, seed: int) -> dict:
    obs = env.reset(seed)
    done = False
    ret = 0.0
    while not done:
        if isinstance(controller, PolicyController):
            controller.observe(obs)
        obs, r, _, done = env.step(controller.actions(env))
        ret += float(np.mean(r))
    m = env.episode_metrics().as_dict()
    m["mean_return"] = ret
    return m


def evaluate(doc: dict, net: TrafficNetwork, controller, scenarios) -> list[dict]:
    """One row per scenario with the five traffic metrics and mean return.

    A scenario is either an integer seed (flows generated at the configured
    rate) or a FlowSpec, which is run with seed 0.
    """
    env = make_env(doc, net)
    generated = env.flows
    rows = []
    for sc in scenarios:
        if isinstance(sc, FlowSpec):
            env.flows, seed = sc, 0
        else:
            env.flows, seed = generated, int(sc)
        rows.append({"seed": seed, **run_episode(env, controller, seed)})
    return rows


def summarize(rows: list[dict]) -> dict:
    """Mean and population standard deviation per metric; trip time over rows that have one."""
    out = {}
    for k in METRIC_KEYS + ("mean_return", "vehicles_entered", "vehicles_exited"):
        vals = [r[k] for r in rows if r.get(k) is not None]
        if vals:
            out[k] = {"mean": statistics.fmean(vals), "std": statistics.pstdev(vals) if len(vals) > 1 else 0.0}
        else:
            out[k] = {"mean": None, "std": None}
    return out


def policy_controller(models: Models, theta: dict) -> PolicyController:
    return PolicyController(models.actor, theta, "argmax")


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    store: Optional[tinynn.ParameterStore] = None
    final_checkpoint: Optional[Path] = None
    models: Optional[Models] = None


class _Run:
    def __init__(self, doc: dict, out_dir: Optional[Path], resume: Optional[Path] = None):
        self.doc = doc
        self.tr = doc["trainer"]
        self.net = cfgmod.build_network(doc)
        self.models = build_models(doc, self.net)
        self.adv_cfg = cfgmod.advantage_config(doc)
        self.deterministic = bool(self.tr["deterministic"])
        workers = self.tr["workers"]
        override = os.environ.get(cfgmod.THREADS_ENV)
        if override and not self.deterministic:
            workers = int(override)
        self.n_workers = 1 if self.deterministic else workers
        self.out_dir = Path(out_dir) if out_dir else None
        self.lock = threading.Lock()
        self.log: list = []
        self.log_file = None
        self.t0 = time.perf_counter()
        self.next_episode = 0
        self.episodes_done = 0
        self.budget = self.tr["episodes"]
        self.config_hash = cfgmod.config_hash(doc)
        self.model_hash = cfgmod.model_hash(doc, self.net)
        self.workers = [
            Worker(w, make_env(doc, self.net), np.random.default_rng([self.tr["seed"], 1000 + w]))
            for w in range(self.n_workers)
        ]
        if resume is not None:
            arrays, meta = tinynn.load_checkpoint(resume)
            if meta["model_hash"] != self.model_hash:
                raise TrainingFault("checkpoint was produced for a different network/model configuration")
            self.store = tinynn.restore_store(arrays, cfgmod.rmsprop_config(doc), meta["version"])
            self.next_episode = self.episodes_done = meta["episode"]
            for w, state in zip(self.workers, meta["rng_states"]):
                w.rng.bit_generator.state = state
        else:
            self.store = init_store(doc, self.models)
        self.error: Optional[BaseException] = None

    # logging ---------------------------------------------------------------

    def _emit(self, record: dict) -> None:
        self.log.append(record)
        if self.log_file is not None:
            self.log_file.write(json.dumps(record, sort_keys=True) + "\n")
            self.log_file.flush()

    def _wall(self):
        return None if self.deterministic else round(time.perf_counter() - self.t0, 3)

    def entropy_coef(self, episode: int) -> float:
        a = self.doc["advantage"]
        if self.budget <= 1:
            return a["entropy_coef"]
        frac = min(episode / (self.budget - 1), 1.0)
        return a["entropy_coef"] + frac * (a["entropy_final"] - a["entropy_coef"])

    def flow_seed(self, episode: int) -> int:
        return self.tr["seed"] * cfgmod.TRAIN_SEED_STRIDE + episode

    # evaluation + checkpoint ------------------------------------------------

    def evaluate_and_checkpoint(self, episode: int, snap: tinynn.Snapshot, tag: Optional[str] = None):
        rows = evaluate(self.doc, self.net, policy_controller(self.models, snap.actor), self.tr["eval_seeds"])
        summary = summarize(rows)
        rec = {
            "kind": "eval",
            "episode": episode,
            "wall_s": self._wall(),
            "mean_return": summary["mean_return"]["mean"],
            "metrics": {k: summary[k]["mean"] for k in METRIC_KEYS},
            "rows": rows,
        }
        self._emit(rec)
        self.checkpoint(episode, tag or f"ckpt_{episode:06d}.bin")
        return rec

    def checkpoint(self, episode: int, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir / name
        meta = {
            "format_version": 1,
            "episode": episode,
            "version": self.store.version,
            "config_hash": self.config_hash,
            "model_hash": self.model_hash,
            "net_fingerprint": self.net.fingerprint(),
            "mode": self.adv_cfg.mode,
            "actor_spec": _spec_dict(self.models.actor),
            "critic_spec": _spec_dict(self.models.critic),
            "rng_states": [w.rng.bit_generator.state for w in self.workers],
        }
        with self.lock:
            arrays = tinynn.store_arrays(self.store)
            tinynn.save_checkpoint(path, arrays, meta)
        return path

    # worker body -------------------------------------------------------------

    def _claim_episode(self) -> Optional[int]:
        with self.lock:
            if self.next_episode >= self.budget:
                return None
            e = self.next_episode
            self.next_episode += 1
            return e

    def work_once(self, worker: Worker) -> bool:
        """One rollout + update. Returns False when the worker has nothing left to do."""
        if not worker.mid_episode:
            e = self._claim_episode()
            if e is None:
                return False
            worker.start_episode(e, self.flow_seed(e))
        snap = self.store.snapshot()
        buf = run_rollout(worker, snap, self.models, self.tr["rollout_T"])
        ga, gc, info = compute_gradients(buf, snap, self.models, self.adv_cfg,
                                         self.entropy_coef(worker.episode), self.doc["advantage"]["reward_scale"])
        self.store.apply(ga, gc)
        if buf.terminal:
            self._finish_episode(worker, info)
        return True

    def _finish_episode(self, worker: Worker, info: GradientInfo) -> None:
        m = worker.env.episode_metrics().as_dict()
        with self.lock:
            self.episodes_done += 1
            done = self.episodes_done
            self._emit({
                "kind": "train",
                "episode": worker.episode + 1,
                "worker": worker.wid,
                "wall_s": self._wall(),
                "mean_return": worker.episode_return,
                "metrics": {k: m[k] for k in METRIC_KEYS},
                "policy_loss": info.policy_loss,
                "critic_loss": info.critic_loss,
                "entropy": info.entropy,
            })
        every = self.tr["eval_every"]
        if every and done % every == 0 and done < self.budget:
            self.evaluate_and_checkpoint(done, self.store.snapshot())

    def run(self) -> TrainResult:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            mode = "a" if self.episodes_done else "w"
            self.log_file = open(self.out_dir / "train_log.ndjson", mode)
        try:
            if self.budget == 0:
                return TrainResult(self.log, self.store, self.checkpoint(0, "ckpt_000000.bin"), self.models)
            if self.episodes_done == 0 and self.tr["eval_every"]:
                self.evaluate_and_checkpoint(0, self.store.snapshot())
            if self.deterministic or self.n_workers == 1:
                self._run_serial()
            else:
                self._run_threads()
            if self.tr["eval_every"]:
                self.evaluate_and_checkpoint(self.episodes_done, self.store.snapshot(), "final.bin")
                final = self.out_dir / "final.bin" if self.out_dir else None
            else:
                final = self.checkpoint(self.episodes_done, "final.bin")
            return TrainResult(self.log, self.store, final, self.models)
        finally:
            if self.log_file is not None:
                self.log_file.close()

    def _run_serial(self) -> None:
        active = list(self.workers)
        while active:
            still = []
            for w in active:
                if self.work_once(w):
                    still.append(w)
            active = still

    def _run_threads(self) -> None:
        def body(w: Worker):
            try:
                while self.error is None and self.work_once(w):
                    pass
            except BaseException as e:  # noqa: BLE001
                with self.lock:
                    if self.error is None:
                        self.error = e

        threads = [threading.Thread(target=body, args=(w,), name=f"worker-{w.wid}") for w in self.workers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self.error is not None:
            raise TrainingFault(f"training aborted: {self.error}") from self.error


def _spec_dict(spec: tinynn.MlpSpec) -> dict:
    return {"input_width": spec.input_width, "hidden_layers": list(spec.hidden_layers),
            "activation": spec.activation, "output_width": spec.output_width, "output_head": spec.output_head}


def train(doc: dict, out_dir=None, resume=None) -> TrainResult:
    """Train per the resolved config; writes train_log.ndjson and checkpoints into ``out_dir``."""
    return _Run(doc, out_dir, resume).run()


def load_policy(checkpoint, doc: dict):
    """(Models, actor params) from a checkpoint, refusing mismatched configurations."""
    arrays, meta = tinynn.load_checkpoint(checkpoint)
    net = cfgmod.build_network(doc)
    models = build_models(doc, net)
    expected = cfgmod.model_hash(doc, net)
    if meta.get("model_hash") != expected:
        raise TrainingFault(
            f"checkpoint model hash {meta.get('model_hash')} does not match this configuration ({expected}); "
            f"network fingerprint in checkpoint {meta.get('net_fingerprint')}, here {net.fingerprint()}"
        )
    theta = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("actor/")}
    return models, theta, net


def controller_for(kind: str, doc: dict, net: TrafficNetwork):
    plan = doc["controller"].get("plan")
    return make_controller(kind, net, [tuple(p) for p in plan] if plan else None)
