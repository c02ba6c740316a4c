from __future__ import annotations

import json

import numpy as np
import pytest

from sociallight import config as cfgmod
from sociallight import tinynn, trainer
from sociallight.advantage import MODES
from sociallight.flows import generate_flows
from sociallight.trainer import TrainingFault

from oracles import rel_error


def small_doc(mode="sociallight", rows=1, cols=2, **trainer_over):
    tr = {"episodes": 2, "episode_len_steps": 12, "rollout_T": 5, "deterministic": True, "eval_every": 1,
          "eval_seeds": [900001, 900002]}
    tr.update(trainer_over)
    return cfgmod.resolve({
        "network": {"rows": rows, "cols": cols},
        "flows": {"rate": 0.2},
        "advantage": {"mode": mode},
        "model": {"actor_hidden": [8], "critic_hidden": [8]},
        "optimizer": {"lr": 1e-3},
        "trainer": tr,
    })


def fresh(doc, seed=0, wid=0):
    net = cfgmod.build_network(doc)
    models = trainer.build_models(doc, net)
    store = trainer.init_store(doc, models)
    w = trainer.Worker(wid, trainer.make_env(doc, net), np.random.default_rng(seed))
    return net, models, store, w


# --- rollouts ----------------------------------------------------------------------


def test_single_step_single_intersection():
    doc = small_doc(rows=1, cols=1)
    net, models, store, w = fresh(doc)
    w.start_episode(0, 5)
    buf = trainer.run_rollout(w, store.snapshot(), models, 1)
    assert buf.T == 1 and buf.num_agents == 1
    assert np.all(buf.neighbor_actions == -1)
    assert not buf.terminal and buf.bootstrap is not None
    assert buf.critic.shape == (1, 1, net.num_phases)


@pytest.mark.parametrize("mode", MODES)
def test_neighbor_actions_align_with_executed_actions(mode):
    doc = small_doc(mode, rows=2, cols=3)
    net, models, store, w = fresh(doc)
    w.start_episode(0, 3)
    buf = trainer.run_rollout(w, store.snapshot(), models, 7)
    for t in range(buf.T):
        for i in range(net.num_intersections):
            for k, j in enumerate(net.adjacency[i]):
                want = -1 if j is None else buf.actions[t, j]
                assert buf.neighbor_actions[t, i, k] == want
    width = 1 if mode.startswith("a3c") else net.num_phases
    assert buf.critic.shape == (7, 6, width)


def test_rollouts_chain_and_stop_at_episode_end():
    doc = small_doc()
    _, models, store, w = fresh(doc)
    w.start_episode(0, 1)
    snap = store.snapshot()
    lens, carried = [], None
    while w.mid_episode:
        b = trainer.run_rollout(w, snap, models, 5)
        if carried is not None:
            # the bootstrap actions are the ones executed first in the next rollout
            assert np.array_equal(b.actions[0], carried)
        carried = None if b.terminal else b.bootstrap.actions.copy()
        lens.append(b.T)
    assert lens == [5, 5, 2]


def test_same_seed_workers_produce_identical_buffers():
    doc = small_doc(rows=2, cols=2)
    _, models, store, w1 = fresh(doc, seed=42, wid=0)
    _, _, _, w2 = fresh(doc, seed=42, wid=1)
    snap = store.snapshot()
    for w in (w1, w2):
        w.start_episode(0, 77)
    for _ in range(2):
        a, b = (trainer.run_rollout(w, snap, models, 4) for w in (w1, w2))
        for name in ("z_aug", "actions", "neighbor_actions", "policy", "critic", "local_reward",
                     "neighborhood_reward"):
            assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_simulator_fault_names_worker(monkeypatch):
    doc = small_doc()
    _, models, store, w = fresh(doc, wid=3)
    w.start_episode(0, 1)

    def boom(*_):
        raise RuntimeError("lane table corrupt")

    monkeypatch.setattr(w.env, "step", boom)
    with pytest.raises(TrainingFault, match="worker 3"):
        trainer.run_rollout(w, store.snapshot(), models, 3)


# --- gradients -----------------------------------------------------------------------


def _buffer(doc, T=3, seed=0, flow_seed=11):
    net, models, store, w = fresh(doc, seed)
    w.start_episode(0, flow_seed)
    # a few warm-up steps so queues are non-trivial
    trainer.run_rollout(w, store.snapshot(), models, 4)
    snap = store.snapshot()
    return models, snap, trainer.run_rollout(w, snap, models, T)


def _perturb(snap):
    """Non-zero biases so every parameter has a gradient."""
    rng = np.random.default_rng(5)
    for p in (snap.actor, snap.critic):
        for k in p:
            p[k] += rng.normal(scale=0.05, size=p[k].shape)
    return snap


@pytest.mark.parametrize("mode", MODES)
def test_gradients_match_finite_differences(mode):
    doc = small_doc(mode)
    models, snap, buf = _buffer(doc)
    snap = _perturb(snap)
    buf.local_reward[:] = np.random.default_rng(1).normal(size=buf.local_reward.shape) * 5
    buf.neighborhood_reward[:] = buf.local_reward * 2
    adv_cfg = cfgmod.advantage_config(doc)
    c = 0.02
    ga, gc, _ = trainer.compute_gradients(buf, snap, models, adv_cfg, c, 0.1)
    # advantages and targets are held fixed (they are not differentiated through)
    res = trainer.prepare_batch(buf, snap, models, adv_cfg, 0.1)["result"]
    T, N = buf.actions.shape
    Z = buf.z_aug.reshape(T * N, -1)
    X = models.critic_input(Z, buf.neighbor_actions.reshape(T * N, 4))
    a = buf.actions.reshape(-1)
    A, G = res.advantages.reshape(-1), res.targets.reshape(-1)

    def actor_loss(theta):
        pi, _ = tinynn.forward(models.actor, theta, Z)
        logp = np.log(pi)
        h = -np.sum(pi * logp, axis=1)
        return (-np.sum(logp[np.arange(len(a)), a] * A) - c * np.sum(h)) / (N * T)

    def critic_loss_(phi):
        out, _ = tinynn.forward(models.critic, phi, X)
        pred = out[np.arange(len(a)), a] if models.q_critic else out[:, 0]
        return np.sum((pred - G) ** 2) / (N * T)

    from oracles import fd_gradients
    for analytic, fn, params in ((ga, actor_loss, snap.actor), (gc, critic_loss_, snap.critic)):
        numeric = fd_gradients(fn, {k: v.copy() for k, v in params.items()})
        for k in params:
            err = rel_error(analytic[k], numeric[k], floor=1e-6)
            assert err.max() < 1e-4, (k, err.max())


@pytest.mark.parametrize("mode", ["sociallight", "raw_coma"])
def test_zero_advantage_and_perfect_critic_give_zero_gradients(mode):
    doc = small_doc(mode)
    models, snap, buf = _buffer(doc)
    last = models.critic.num_layers - 1
    snap.critic[f"W{last}"][:] = 0.0
    snap.critic[f"b{last}"][:] = 0.0
    buf.local_reward[:] = 0.0
    buf.neighborhood_reward[:] = 0.0
    ga, gc, info = trainer.compute_gradients(buf, snap, models, cfgmod.advantage_config(doc), 0.0)
    assert info.policy_loss == 0.0 and info.critic_loss == 0.0
    for g in list(ga.values()) + list(gc.values()):
        assert not np.any(g)


@pytest.mark.parametrize("mode", MODES)
def test_duplicated_buffer_leaves_gradients_unchanged(mode):
    doc = small_doc(mode)
    models, snap, buf = _buffer(doc, T=4)
    cfg = cfgmod.advantage_config(doc)
    ga, gc, _ = trainer.compute_gradients(buf, snap, models, cfg, 0.01, 0.01)
    da, dc, _ = trainer.compute_gradients(buf.duplicated(), snap, models, cfg, 0.01, 0.01)
    for g, d in ((ga, da), (gc, dc)):
        for k in g:
            np.testing.assert_allclose(d[k], g[k], rtol=1e-10, atol=1e-14)


def test_non_finite_loss_is_a_fault():
    doc = small_doc()
    models, snap, buf = _buffer(doc)
    buf.local_reward[1, 0] = np.nan
    buf.neighborhood_reward[1, :] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(TrainingFault, match=r"non-finite loss.*local_reward at \(t, agent\) = \(1, 0\)"):
        trainer.compute_gradients(buf, snap, models, cfgmod.advantage_config(doc), 0.01)


# --- training loop ---------------------------------------------------------------------


def test_zero_episode_budget_writes_initial_checkpoint_only(tmp_path):
    res = trainer.train(small_doc(episodes=0), tmp_path)
    assert res.log == []
    assert (tmp_path / "train_log.ndjson").read_text() == ""
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000000.bin", "train_log.ndjson"]
    _, meta = tinynn.load_checkpoint(res.final_checkpoint)
    assert meta["episode"] == 0 and meta["version"] == 0


def test_log_schema_and_checkpoints(tmp_path):
    res = trainer.train(small_doc(episodes=2, eval_every=1), tmp_path)
    kinds = [(r["kind"], r["episode"]) for r in res.log]
    assert kinds == [("eval", 0), ("train", 1), ("eval", 1), ("train", 2), ("eval", 2)]
    lines = (tmp_path / "train_log.ndjson").read_text().splitlines()
    assert [json.loads(x) for x in lines] == json.loads(json.dumps(res.log))
    for r in res.log:
        assert {"episode", "wall_s", "mean_return", "metrics"} <= set(r)
        assert set(r["metrics"]) == set(trainer.METRIC_KEYS)
    assert {p.name for p in tmp_path.glob("*.bin")} == {"ckpt_000000.bin", "ckpt_000001.bin", "final.bin"}


def test_deterministic_runs_are_bit_identical(tmp_path):
    doc = small_doc(episodes=3, eval_every=2, rows=2, cols=2)
    for d in ("a", "b"):
        trainer.train(doc, tmp_path / d)
    for name in ("train_log.ndjson", "ckpt_000000.bin", "ckpt_000002.bin", "final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_resume_reproduces_uninterrupted_run(tmp_path):
    doc = small_doc(episodes=4, eval_every=2, rows=2, cols=2)
    full = trainer.train(doc, tmp_path / "full")
    part = trainer.train(doc, tmp_path / "part", resume=tmp_path / "full" / "ckpt_000002.bin")
    assert (tmp_path / "full" / "final.bin").read_bytes() == (tmp_path / "part" / "final.bin").read_bytes()
    tail = [r for r in full.log if r["episode"] > 2]
    assert json.dumps(part.log) == json.dumps(tail)


def test_resume_refuses_other_model(tmp_path):
    trainer.train(small_doc(episodes=0), tmp_path)
    other = small_doc(episodes=1, rows=2, cols=2)
    with pytest.raises(TrainingFault, match="different network"):
        trainer.train(other, tmp_path / "x", resume=tmp_path / "ckpt_000000.bin")


def test_threaded_training_completes_budget():
    doc = small_doc(episodes=4, eval_every=0, deterministic=False, workers=2)
    res = trainer.train(doc)
    train = [r for r in res.log if r["kind"] == "train"]
    assert sorted(r["episode"] for r in train) == [1, 2, 3, 4]
    assert {r["worker"] for r in train} <= {0, 1}
    assert res.store.version == 4 * 3  # 12 steps / T=5 -> 3 rollouts per episode


def test_worker_crash_aborts_and_keeps_partial_log(tmp_path, monkeypatch):
    doc = small_doc(episodes=3, eval_every=0)
    calls = {"n": 0}
    real = trainer.compute_gradients

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 5:
            raise TrainingFault("injected")
        return real(*a, **k)

    monkeypatch.setattr(trainer, "compute_gradients", flaky)
    with pytest.raises(TrainingFault, match="injected"):
        trainer.train(doc, tmp_path)
    lines = (tmp_path / "train_log.ndjson").read_text().splitlines()
    assert [json.loads(x)["episode"] for x in lines] == [1]


def test_entropy_coefficient_anneals_linearly():
    doc = small_doc(episodes=5)
    run = trainer._Run(doc, None)
    a = doc["advantage"]
    assert run.entropy_coef(0) == a["entropy_coef"]
    assert run.entropy_coef(4) == pytest.approx(a["entropy_final"])
    assert run.entropy_coef(2) == pytest.approx((a["entropy_coef"] + a["entropy_final"]) / 2)


# --- evaluation -------------------------------------------------------------------------


def test_evaluate_is_deterministic_and_complete(grid2):
    doc = small_doc(rows=2, cols=2)
    ctrl = trainer.controller_for("fixed_time", doc, grid2)
    a = trainer.evaluate(doc, grid2, ctrl, [900001, 900002])
    b = trainer.evaluate(doc, grid2, trainer.controller_for("fixed_time", doc, grid2), [900001, 900002])
    assert a == b
    for row in a:
        assert set(trainer.METRIC_KEYS) <= set(row)
    s = trainer.summarize(a)
    for k in trainer.METRIC_KEYS:
        vals = [r[k] for r in a if r[k] is not None]
        if vals:
            assert s[k]["mean"] == pytest.approx(np.mean(vals))
            assert s[k]["std"] == pytest.approx(np.std(vals))


def test_evaluate_accepts_explicit_flow_files(grid2):
    doc = small_doc(rows=2, cols=2)
    spec = generate_flows(grid2, 0.2, cfgmod.horizon_s(doc), 900003)
    ctrl = trainer.controller_for("max_pressure", doc, grid2)
    from_spec = trainer.evaluate(doc, grid2, ctrl, [spec])[0]
    assert from_spec["seed"] == 0
    assert from_spec["vehicles_entered"] > 0


def test_training_flow_seeds_never_hit_eval_seeds():
    doc = small_doc(episodes=1000)
    run = trainer._Run(doc, None)
    seen = {run.flow_seed(e) for e in range(1000)}
    assert not seen & set(doc["trainer"]["eval_seeds"])


def test_policy_round_trip_through_checkpoint(tmp_path):
    doc = small_doc(episodes=1, eval_every=0)
    res = trainer.train(doc, tmp_path)
    models, theta, net = trainer.load_policy(res.final_checkpoint, doc)
    for k, v in res.store.actor.items():
        assert np.array_equal(theta[k], v)
    with pytest.raises(TrainingFault, match="does not match"):
        trainer.load_policy(res.final_checkpoint, small_doc(mode="a3c_local"))
