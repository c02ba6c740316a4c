from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from sociallight import trainer
from sociallight.cli import CSV_COLUMNS, main
from sociallight.config import load_config
from sociallight.flows import load_flows


def write_config(path, **over):
    doc = {
        "network": {"rows": 2, "cols": 2},
        "flows": {"rate": 0.2},
        "advantage": {"mode": "sociallight"},
        "model": {"actor_hidden": [8], "critic_hidden": [8]},
        "trainer": {"episodes": 2, "episode_len_steps": 10, "rollout_T": 5, "deterministic": True,
                    "eval_every": 1, "eval_seeds": [900001, 900002]},
    }
    for k, v in over.items():
        doc[k] = {**doc.get(k, {}), **v}
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


# --- gen-flows -----------------------------------------------------------------------


def test_gen_flows_writes_parseable_file(tmp_path, capsys):
    out = tmp_path / "f.json"
    assert main(["gen-flows", "--net", "3x3", "--rate", "0.3", "--horizon", "300", "--seed", "1",
                 "--out", str(out)]) == 0
    spec = load_flows(out)
    assert f"{len(spec.trips)} trips" in capsys.readouterr().out
    assert len(spec.trips) > 0


def test_gen_flows_same_seed_byte_identical(tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        main(["gen-flows", "--net", "2x3", "--rate", "0.5", "--horizon", "200", "--seed", "9", "--out", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


@pytest.mark.parametrize("rate", ["0", "-0.1"])
def test_gen_flows_bad_rate_is_usage_error(tmp_path, rate, capsys):
    code = main(["gen-flows", "--net", "2x2", "--rate", rate, "--horizon", "10", "--seed", "1",
                 "--out", str(tmp_path / "x.json")])
    assert code == 2
    assert "--rate" in capsys.readouterr().err


def test_missing_argument_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["gen-flows", "--net", "2x2"])
    assert e.value.code == 2


# --- train -------------------------------------------------------------------------------


def test_train_zero_episodes(tmp_path):
    cfg = write_config(tmp_path / "c.json", trainer={"episodes": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert (out / "train_log.ndjson").read_text() == ""
    assert (out / "ckpt_000000.bin").exists()
    assert json.loads((out / "resolved_config.json").read_text())["trainer"]["episodes"] == 0


def test_train_missing_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network": {"rows": 2, "cols": 2}, "flows": {"rate": 0.2},
                               "trainer": {"episodes": 1}}))
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 2
    assert "'advantage.mode'" in capsys.readouterr().err


def test_train_lists_all_problems(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"network": {"rows": 2}, "flows": {"rate": 0},
                               "advantage": {"mode": "x"}, "trainer": {"episodes": 1}}))
    assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err
    for needle in ("network.cols", "flows.rate", "advantage.mode"):
        assert needle in err


def test_train_twice_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    for d in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / d)]) == 0
    for name in ("train_log.ndjson", "final.bin", "ckpt_000001.bin", "resolved_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_plots_opt_in(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "a")])
    assert not (tmp_path / "a" / "curves.png").exists()
    main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "b"), "--plots"])
    assert (tmp_path / "b" / "curves.png").stat().st_size > 0


# --- eval ---------------------------------------------------------------------------------


def test_eval_controller_writes_csv_and_summary(tmp_path):
    cfg = write_config(tmp_path / "c.json", trainer={"episode_len_steps": 60})
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg), "--controller", "fixed_time", "--out", str(out)]) == 0
    rows = read_csv(out / "metrics.csv")
    assert tuple(rows[0]) == CSV_COLUMNS
    body = rows[1:]
    assert len(body) == 2
    for r in body:
        assert all(r[CSV_COLUMNS.index(c)] != "" for c in ("avg_queue", "avg_speed", "avg_int_delay",
                                                            "avg_cum_delay", "avg_trip_time"))
    summary = json.loads((out / "summary.json").read_text())
    for col in ("avg_queue", "avg_speed", "avg_int_delay", "avg_cum_delay", "avg_trip_time"):
        vals = [float(r[CSV_COLUMNS.index(col)]) for r in body]
        assert summary[col]["mean"] == pytest.approx(np.mean(vals), rel=1e-12)
        assert summary[col]["std"] == pytest.approx(np.std(vals), rel=1e-12, abs=1e-12)


def test_eval_explicit_scenarios(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    flows = tmp_path / "f.json"
    main(["gen-flows", "--net", "2x2", "--rate", "0.2", "--horizon", "50", "--seed", "4", "--out", str(flows)])
    out = tmp_path / "ev"
    assert main(["eval", "--config", str(cfg), "--controller", "max_pressure",
                 "--scenarios", f"900007,{flows}", "--out", str(out)]) == 0
    body = read_csv(out / "metrics.csv")[1:]
    assert [r[1] for r in body] == ["900007", "0"]


def test_eval_unknown_scenario_is_usage_error(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["eval", "--config", str(cfg), "--controller", "greedy", "--scenarios", "nofile.json",
                 "--out", str(tmp_path / "o")]) == 2


def test_eval_needs_exactly_one_source(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_eval_checkpoint_on_its_network_and_refusal_elsewhere(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", trainer={"episodes": 1, "eval_every": 0})
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(run)]) == 0
    ck = str(run / "final.bin")
    assert main(["eval", "--config", str(cfg), "--checkpoint", ck, "--out", str(tmp_path / "ok")]) == 0
    doc = json.loads(cfg.read_text())
    table = json.loads((run / "resolved_config.json").read_text())["network"]["phase_table"]
    doc["network"]["phase_table"] = table[1:] + table[:1]
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    capsys.readouterr()
    assert main(["eval", "--config", str(other), "--checkpoint", ck, "--out", str(tmp_path / "bad")]) == 3
    assert "does not match" in capsys.readouterr().err
    assert not (tmp_path / "bad").exists()


# --- compare --------------------------------------------------------------------------------


TABLE_HEADER = ["method", "avg_queue", "avg_speed", "avg_int_delay", "avg_cum_delay", "avg_trip_time"]


def test_compare_classical_only_has_no_curves(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg), "--methods", "fixed_time,max_pressure", "--out", str(out)]) == 0
    rows = read_csv(out / "comparison.csv")
    assert rows[0] == TABLE_HEADER
    assert [r[0] for r in rows[1:]] == ["fixed_time", "max_pressure"]
    assert not list(out.glob("curve_*.csv"))
    # "mean (std)" cells
    assert all(" (" in c and c.endswith(")") for c in rows[1][1:])


def test_compare_learned_methods_share_episode_axis(tmp_path):
    cfg = write_config(tmp_path / "c.json", trainer={"episodes": 3, "eval_every": 0})
    out = tmp_path / "cmp"
    methods = ["sociallight", "a3c_neighborhood", "raw_coma"]
    assert main(["compare", "--config", str(cfg), "--methods", ",".join(methods), "--out", str(out)]) == 0
    axes = []
    for m in methods:
        rows = read_csv(out / f"curve_{m}.csv")
        assert rows[0] == ["episode", "mean_return", "avg_speed", "avg_intersection_delay"]
        axes.append([r[0] for r in rows[1:]])
    assert axes[0] == axes[1] == axes[2] == ["1", "2", "3"]
    table = read_csv(out / "comparison.csv")
    assert table[0] == TABLE_HEADER and [r[0] for r in table[1:]] == methods


def test_compare_unknown_method(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["compare", "--config", str(cfg), "--methods", "fixed_time,colight", "--out",
                 str(tmp_path / "o")]) == 2
    assert "colight" in capsys.readouterr().err


def test_thread_override_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SOCIALLIGHT_WORKERS", "2")
    cfg = write_config(tmp_path / "c.json", trainer={"deterministic": False, "workers": 5})
    assert trainer._Run(load_config(cfg), None).n_workers == 2
    # deterministic mode ignores the override
    cfg = write_config(tmp_path / "d.json", trainer={"workers": 5})
    assert trainer._Run(load_config(cfg), None).n_workers == 1
