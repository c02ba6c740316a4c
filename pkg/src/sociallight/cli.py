"""Command-line entry point.

    sociallight gen-flows --net 3x3 --rate 0.3 --horizon 3600 --seed 1 --out flows.json
    sociallight train --config exp.json --out-dir runs/exp
    sociallight eval --config exp.json --controller max_pressure --out evals/mp
    sociallight compare --config exp.json --methods fixed_time,sociallight --out cmp

Exit codes: 0 success, 2 usage or config error, 3 runtime fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

from . import config as cfgmod
from . import trainer
from .controllers import CLASSICAL
from .advantage import MODES
from .flows import FlowFileError, generate_flows, load_flows, save_flows
from .netmodel import build_grid_network, load_network

log = logging.getLogger("sociallight")

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 2, 3

# CSV column -> metric key, in table order
CSV_METRICS = (
    ("avg_queue", "avg_queue_length"),
    ("avg_speed", "avg_speed"),
    ("avg_int_delay", "avg_intersection_delay"),
    ("avg_cum_delay", "avg_cumulative_delay"),
    ("avg_trip_time", "avg_trip_time"),
)
CSV_COLUMNS = ("episode", "seed") + tuple(c for c, _ in CSV_METRICS) + ("entered", "exited")
CURVE_COLUMNS = ("episode", "mean_return", "avg_speed", "avg_intersection_delay")


class UsageError(Exception):
    pass


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k, r in enumerate(rows):
            w.writerow([k, r["seed"]] + [_fmt(r[m]) for _, m in CSV_METRICS]
                       + [r["vehicles_entered"], r["vehicles_exited"]])


def summary_doc(rows: list[dict]) -> dict:
    s = trainer.summarize(rows)
    out = {}
    for col, m in CSV_METRICS:
        mean, std = s[m]["mean"], s[m]["std"]
        out[col] = {"mean": mean, "std": std,
                    "text": "absent" if mean is None else f"{mean:.2f} ({std:.2f})"}
    out["mean_return"] = s["mean_return"]
    out["episodes"] = len(rows)
    return out


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_net(spec: str):
    m = re.fullmatch(r"(\d+)x(\d+)", spec)
    if m:
        return build_grid_network(int(m.group(1)), int(m.group(2)))
    p = Path(spec)
    if not p.exists():
        raise UsageError(f"--net must be ROWSxCOLS or an existing network file, got {spec!r}")
    return load_network(p)


def _scenarios(arg: str | None, doc: dict) -> list:
    """Comma-separated seeds and/or flow files; defaults to the configured evaluation seeds."""
    if not arg:
        return list(doc["trainer"]["eval_seeds"])
    out = []
    for item in arg.split(","):
        item = item.strip()
        if re.fullmatch(r"\d+", item):
            out.append(int(item))
        elif Path(item).exists():
            out.append(load_flows(item))
        else:
            raise UsageError(f"scenario {item!r} is neither a seed nor an existing flow file")
    return out


def _methods(arg: str) -> list[str]:
    methods = [m.strip() for m in arg.split(",") if m.strip()]
    known = MODES + CLASSICAL
    bad = [m for m in methods if m not in known]
    if bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(known)}")
    if not methods:
        raise UsageError("--methods is empty")
    return methods


# --- commands ---------------------------------------------------------------------------


def cmd_gen_flows(args) -> int:
    if args.rate <= 0:
        raise UsageError("--rate must be > 0")
    if args.horizon <= 0:
        raise UsageError("--horizon must be > 0")
    net = _parse_net(args.net)
    spec = generate_flows(net, args.rate, args.horizon, args.seed)
    save_flows(spec, args.out)
    print(f"{len(spec.trips)} trips written to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = cfgmod.load_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(doc, out / "resolved_config.json")
    res = trainer.train(doc, out, resume=args.resume)
    evals = [r for r in res.log if r["kind"] == "eval"]
    if evals:
        last = evals[-1]
        print(f"episode {last['episode']}: eval mean return {last['mean_return']:.3f}")
    print(f"checkpoint: {res.final_checkpoint}")
    if args.plots:
        from .plotting import plot_curves
        plot_curves({doc["advantage"]["mode"]: _curve_rows(res.log)}, out / "curves.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = cfgmod.load_config(args.config, require=("network.rows", "network.cols", "flows.rate"))
    if (args.checkpoint is None) == (args.controller is None):
        raise UsageError("give exactly one of --checkpoint or --controller")
    if args.checkpoint is not None:
        if doc["advantage"]["mode"] is None:
            raise UsageError("evaluating a checkpoint needs advantage.mode in the config")
        models, theta, net = trainer.load_policy(args.checkpoint, doc)
        ctrl = trainer.policy_controller(models, theta)
    else:
        if args.controller not in CLASSICAL:
            raise UsageError(f"--controller must be one of {', '.join(CLASSICAL)}")
        net = cfgmod.build_network(doc)
        ctrl = trainer.controller_for(args.controller, doc, net)
    rows = trainer.evaluate(doc, net, ctrl, _scenarios(args.scenarios, doc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump_config(doc, out / "resolved_config.json")
    write_metrics_csv(rows, out / "metrics.csv")
    summary = summary_doc(rows)
    _write_json(summary, out / "summary.json")
    for col, _ in CSV_METRICS:
        print(f"{col:>14}: {summary[col]['text']}")
    return EXIT_OK


def _curve_rows(log_records: list[dict]) -> list[dict]:
    rows = []
    for r in sorted((x for x in log_records if x["kind"] == "train"), key=lambda x: x["episode"]):
        rows.append({"episode": r["episode"], "mean_return": r["mean_return"],
                     "avg_speed": r["metrics"]["avg_speed"],
                     "avg_intersection_delay": r["metrics"]["avg_intersection_delay"]})
    return rows


def cmd_compare(args) -> int:
    methods = _methods(args.methods)
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as e:
        raise cfgmod.ConfigError([f"{args.config}: invalid JSON at line {e.lineno}: {e.msg}"]) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trained = [m for m in methods if m in MODES]
    base = cfgmod.resolve(raw, require=cfgmod.REQUIRED[:3] + (("trainer.episodes",) if trained else ()))
    cfgmod.dump_config(base, out / "resolved_config.json")
    table, curves = {}, {}
    for m in methods:
        if m in MODES:
            doc = cfgmod.resolve({**raw, "advantage": {**raw.get("advantage", {}), "mode": m}})
            res = trainer.train(doc, out / m)
            evals = [r for r in res.log if r["kind"] == "eval"]
            if evals:
                rows = evals[-1]["rows"]
            else:
                rows = trainer.evaluate(doc, cfgmod.build_network(doc),
                                        trainer.policy_controller(res.models, res.store.actor),
                                        doc["trainer"]["eval_seeds"])
            curves[m] = _curve_rows(res.log)
            _write_curve_csv(curves[m], out / f"curve_{m}.csv")
        else:
            net = cfgmod.build_network(base)
            rows = trainer.evaluate(base, net, trainer.controller_for(m, base, net), base["trainer"]["eval_seeds"])
        table[m] = summary_doc(rows)
        log.info("%s done", m)
    _write_table(table, out / "comparison.csv")
    _write_json(table, out / "comparison.json")
    if args.plots and curves:
        from .plotting import plot_curves
        plot_curves(curves, out / "curves.png")
    print((out / "comparison.csv").read_text(), end="")
    return EXIT_OK


def _write_curve_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CURVE_COLUMNS])


def _write_table(table: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("method",) + tuple(c for c, _ in CSV_METRICS))
        for m, s in table.items():
            w.writerow([m] + [s[c]["text"] for c, _ in CSV_METRICS])


# --- argument parsing -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sociallight", description="Cooperative traffic-signal control: simulate, train, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-flows", help="generate a Poisson trip file")
    g.add_argument("--net", required=True, help="ROWSxCOLS or a network JSON file")
    g.add_argument("--rate", type=float, required=True, help="arrivals per second")
    g.add_argument("--horizon", type=float, required=True, help="seconds")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_flows)

    t = sub.add_parser("train", help="train a policy from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--plots", action="store_true", help="also render curves.png")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a classical controller")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--controller", help=", ".join(CLASSICAL))
    e.add_argument("--scenarios", help="comma-separated seeds and/or flow files")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train/evaluate several methods on identical seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--methods", required=True, help="comma-separated: " + ", ".join(MODES + CLASSICAL))
    c.add_argument("--out", required=True)
    c.add_argument("--plots", action="store_true", help="also render curves.png")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingFault, FlowFileError, OSError, ValueError, FloatingPointError) as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
