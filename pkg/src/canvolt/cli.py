"""Command line entry point: ``canvolt <subcommand> ...``.

Exit codes: 0 on success, 2 when ``identify`` cannot name a unique ECU,
1 on any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import acklearn, classifier, fleets, harness, instance, profile
from .bus import load_config, run_scenario, save_config
from .instance import FEATURES, InstanceTable
from .pipeline import PipelineParams, ecu_tables, identify, make_profile, owners
from .trace import read_trace, write_trace

log = logging.getLogger("canvolt")


def _out(args, default: str) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out / default


def _bus(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return fleets.preset(args.preset or "sedan")


def _owner_map(args) -> dict[int, str] | None:
    if getattr(args, "config", None) or getattr(args, "preset", None):
        return owners(_bus(args))
    return None


def _group(table: InstanceTable, owner_map) -> dict[str, InstanceTable]:
    if owner_map is None:
        legit = table.select(~table.attack)
        return {f"0x{i:03X}": legit.select(legit.message_id == i).sorted() for i in np.unique(legit.message_id)}
    return {k: v for k, v in ecu_tables(table, owner_map).items() if len(v)}


def _params(args) -> PipelineParams:
    fields = {f.name for f in dataclasses.fields(PipelineParams)}
    return PipelineParams(**{k: v for k, v in vars(args).items() if k in fields and v is not None})


def cmd_simulate(args) -> int:
    bus = _bus(args)
    res = run_scenario(bus, args.seed, args.duration)
    path = _out(args, "trace.csv")
    write_trace(path, res.trace, res.truth)
    save_config(path.with_name("config.json"), bus)
    print(f"wrote {len(res.trace)} samples of {len(res.frames)} frames to {path}")
    return 0


def cmd_learn_ack(args) -> int:
    trace = read_trace(args.trace)
    if args.id:
        thr = {int(args.id, 16): acklearn.learn(trace, int(args.id, 16), args.m, args.n, args.b)}
    else:
        thr = acklearn.learn_all(trace, args.m, args.n, args.b)
    path = _out(args, "thresholds.json")
    acklearn.save_thresholds(path, thr)
    for t in thr.values():
        print(json.dumps(t.to_dict()))
    return 0


def cmd_instances(args) -> int:
    trace = read_trace(args.trace)
    thr = acklearn.load_thresholds(args.thresholds)
    tab = instance.extract_instances(trace, thr, args.kappa, args.r, args.alpha)
    path = _out(args, "instances.csv")
    instance.write_instances(path, tab)
    print(f"wrote {len(tab)} instances to {path}")
    return 0


def cmd_profile(args) -> int:
    tab = instance.read_instances(args.instances)
    params = _params(args)
    fleet = {n: make_profile(t, n, params) for n, t in _group(tab, _owner_map(args)).items()}
    path = _out(args, "fleet.json")
    profile.save_fleet(path, fleet)
    for n, p in fleet.items():
        print(f"{n}\tupsilon={p.upsilon:.4f}\tinstances={p.sample_count}")
    return 0


def cmd_identify(args) -> int:
    tab = instance.read_instances(args.intrusion)
    if not tab.attack.any():
        tab = InstanceTable(tab.time, tab.features, tab.message_id, np.ones(len(tab), bool))
    fleet = profile.load_fleet(args.fleet)
    model = classifier.ForestModel.load(args.model) if args.model else None
    v = identify(tab, fleet, model, _params(args), forced=args.forced)
    print(json.dumps(v.to_dict(), sort_keys=True))
    return 0 if v.ecu is not None else 2


def cmd_adjust(args) -> int:
    fleet = profile.load_fleet(args.fleet)
    groups = _group(instance.read_instances(args.recent), _owner_map(args))
    recent = {n: t.features for n, t in groups.items()}
    adj = profile.adjust_profiles(fleet, recent, per_ecu=args.per_ecu)
    path = _out(args, "fleet.adjusted.json")
    profile.save_fleet(path, fleet)
    print(json.dumps({"delta": adj.delta, "applied": adj.applied, "skipped": list(adj.skipped)}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    tab = instance.read_instances(args.instances)
    groups = _group(tab, _owner_map(args))
    X = np.concatenate([t.features for t in groups.values()])
    y = np.concatenate([[n] * len(t) for n, t in groups.items()])
    ds = classifier.InstanceDataset(X, y, None, FEATURES).split(args.fraction, args.seed)
    model = classifier.train(ds, args.trees, args.seed)
    path = _out(args, "model.json")
    model.save(path)
    test = ~ds.train
    acc = float(np.mean(model.predict(ds.features[test], FEATURES) == ds.labels[test])) if test.any() else float("nan")
    print(f"wrote {model.n_trees}-tree model to {path}; held-out accuracy {acc:.4f}")
    return 0


def cmd_verify(args) -> int:
    model = classifier.ForestModel.load(args.model)
    tab = instance.read_instances(args.attack_instances)
    if tab.attack.any():
        tab = tab.select(tab.attack)
    cands = [c.strip() for c in args.candidates.split(",")] if args.candidates else None
    res = classifier.resolve(model, tab.features, cands, FEATURES)
    print(json.dumps(dataclasses.asdict(res), sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    bus = load_config(args.config) if args.config else None
    scenarios = harness.SCENARIOS if args.scenario == "all" else (args.scenario,)
    out = Path(args.out or "evaluation")
    for s in scenarios:
        cfg = harness.ExperimentConfig(s, args.preset or "sedan", bus, args.seed, _params(args), args.duration, args.trials,
                                       out_dir=str(out / s) if len(scenarios) > 1 else str(out))
        rep = harness.run_experiment(cfg)
        print(f"{s}: false identification rate {rep.summary['false_identification_rate']:.4f} "
              f"over {rep.summary['confusion']['total']} attempts -> {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="bus config JSON")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--preset", default=argparse.SUPPRESS, choices=sorted(fleets.PRESETS),
                        help="preset fleet when no --config is given")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="canvolt", parents=[common],
                                description="CAN voltage fingerprinting simulator and attacker identification")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate bus traffic to a trace CSV")
    s.add_argument("--duration", type=float, default=30.0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("learn-ack", parents=[common], help="learn ACK thresholds per message ID")
    s.add_argument("--trace", required=True)
    s.add_argument("--id", help="hex message ID (default: all IDs)")
    s.add_argument("--m", type=int, default=30)
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--b", type=float, default=3.0)
    s.set_defaults(func=cmd_learn_ack)

    s = sub.add_parser("instances", parents=[common], help="derive voltage instances from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--kappa", type=int, default=15)
    s.add_argument("--r", type=int, default=10)
    s.add_argument("--alpha", type=float, default=0.02)
    s.set_defaults(func=cmd_instances)

    s = sub.add_parser("profile", parents=[common], help="build voltage profiles from instances")
    s.add_argument("--instances", required=True)
    s.add_argument("--forgetting", type=float)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("identify", parents=[common], help="identify the sender of intrusion instances")
    s.add_argument("--intrusion", required=True)
    s.add_argument("--fleet", required=True, help="fleet profile JSON")
    s.add_argument("--model", help="forest model for ambiguous matches")
    s.add_argument("--forced", action="store_true", help="always run classifier verification")
    s.add_argument("--rel-tol", dest="rel_tol", type=float)
    s.add_argument("--abs-tol", dest="abs_tol", type=float)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("adjust", parents=[common], help="adjust profiles for a supply shift")
    s.add_argument("--fleet", required=True, help="fleet profile JSON")
    s.add_argument("--recent", required=True)
    s.add_argument("--per-ecu", action="store_true")
    s.set_defaults(func=cmd_adjust)

    s = sub.add_parser("train", parents=[common], help="train the verification forest")
    s.add_argument("--instances", required=True)
    s.add_argument("--trees", type=int, default=200)
    s.add_argument("--fraction", type=float, default=0.5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("verify", parents=[common], help="classify attack instances among candidates")
    s.add_argument("--model", required=True)
    s.add_argument("--attack-instances", required=True)
    s.add_argument("--candidates")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("evaluate", parents=[common], help="run experiment scenarios and write reports")
    s.add_argument("--scenario", default="all", choices=("all",) + harness.SCENARIOS)
    s.add_argument("--trials", type=int)
    s.add_argument("--duration", type=float)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for k, v in (("seed", 0), ("config", None), ("out", None), ("preset", None), ("verbose", False)):
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        if args.verbose:
            log.exception("failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
