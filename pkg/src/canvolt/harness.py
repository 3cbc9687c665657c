"""Experiment orchestration, confusion matrices and report output.

A scenario run is a pure function of ``(ExperimentConfig, seed)``.  The
deterministic part of the outcome goes to ``report.json``; wall-clock
statistics go to a separate ``timing.json`` so reports stay byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adversary, classifier, fleets
from .adversary import AttackPlan
from .bus import BusConfig, SimResult, run_scenario
from .instance import FEATURES, InstanceTable
from .pipeline import (FleetState, PipelineParams, Verdict, ecu_tables, extract, identify, learn_fleet,
                       make_profile, stage, train_model)
from .profile import adjust_profiles, match_profile

SCENARIOS = ("baseline", "timing_aware_attack", "tva_arbitrary", "tva_targeted_dataset", "cold_start_adjust")
UNKNOWN = "unknown"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "baseline"
    fleet: str = "sedan"
    bus: Optional[BusConfig] = None
    seed: int = 0
    params: PipelineParams = PipelineParams()
    duration: Optional[float] = None
    trials: Optional[int] = None
    attack_window: float = 3.0
    supply_shift: float = 0.05
    out_dir: Optional[str] = None

    def bus_config(self) -> BusConfig:
        return self.bus if self.bus is not None else fleets.preset(self.fleet)

    def fleet_label(self) -> str:
        return "custom" if self.bus is not None else self.fleet


_DEFAULTS = {  # scenario -> (baseline duration s, trials)
    "baseline": (60.0, 0),
    "timing_aware_attack": (30.0, 200),
    "tva_arbitrary": (30.0, 40),
    "tva_targeted_dataset": (250.0, 1000),
    "cold_start_adjust": (30.0, 20),
}


def config_hash(config: BusConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- caching

_CACHE: dict = {}


def simulate_cached(config: BusConfig, seed: int, duration: float) -> SimResult:
    key = ("sim", config_hash(config), seed, duration)
    if key not in _CACHE:
        with stage("bus-sim"):
            _CACHE[key] = run_scenario(config, seed, duration)
    return _CACHE[key]


def learn_cached(config: BusConfig, seed: int, duration: float, params: PipelineParams) -> FleetState:
    key = ("fleet", config_hash(config), seed, duration, params)
    if key not in _CACHE:
        _CACHE[key] = learn_fleet(simulate_cached(config, seed, duration).trace, config, params,
                                  keep_history=True)
    return _CACHE[key]


def clear_cache() -> None:
    _CACHE.clear()


# ---------------------------------------------------------------- confusion matrix

@dataclass
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((len(self.labels), len(self.labels) + 1), dtype=np.int64)

    @property
    def columns(self) -> tuple[str, ...]:
        return self.labels + (UNKNOWN,)

    def add(self, actual: str, predicted: Optional[str]) -> None:
        col = self.columns.index(predicted) if predicted in self.labels else len(self.labels)
        self.counts[self.labels.index(actual), col] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def false_identification_rate(self) -> float:
        if self.total == 0:
            return 0.0
        return float(1.0 - np.trace(self.counts[:, :len(self.labels)]) / self.total)

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "columns": list(self.columns),
                "counts": self.counts.tolist(), "total": self.total,
                "false_identification_rate": self.false_identification_rate}


# ---------------------------------------------------------------- report

@dataclass
class Report:
    summary: dict
    series: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_clean(self.summary), indent=2, sort_keys=True) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not math.isfinite(x) else x
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    return x


PLOT_FILES = {
    "psi_accum": ("psi_accum.csv", ["ecu", "t_ks", "psi_accum"]),
    "f1_f2": ("f1_f2.csv", ["ecu", "time_s", "f1", "f2"]),
    "f3_f6": ("f3_f6.csv", ["ecu", "time_s", "f3", "f4", "f5", "f6"]),
    "adjustment": ("adjustment.csv", ["ecu", "upsilon_reference", "upsilon_pre", "upsilon_post"]),
    "confusion": ("confusion.csv", ["actual", "predicted", "count"]),
}


def emit_plot_data(report: Report, out_dir: str | Path) -> list[Path]:
    """CSV series for external plotting; missing series give header-only files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key, (fname, header) in PLOT_FILES.items():
        path = out_dir / fname
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in report.series.get(key, []):
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        paths.append(path)
    return paths


def write_report(report: Report, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(report.to_json())
    (out_dir / "timing.json").write_text(json.dumps(report.timing, indent=2, sort_keys=True) + "\n")
    emit_plot_data(report, out_dir)
    return path


# ---------------------------------------------------------------- helpers

def _profile_summary(fleet: FleetState) -> dict:
    out = {}
    for name, p in fleet.profiles.items():
        ols = p.upsilon_ols
        out[name] = {"upsilon": p.upsilon, "upsilon_ols": ols,
                     "rls_ols_rel_err": abs(p.upsilon - ols) / abs(ols) if ols else 0.0,
                     "r2": p.linearity_r2() if p.history_t else None,
                     "sample_count": p.sample_count, "t_origin": p.t_origin,
                     "nu_star_h": p.cvd.nu_star_h, "nu_star_l": p.cvd.nu_star_l}
    return out


def _series_from_fleet(fleet: FleetState, stride: int = 10) -> dict:
    psi, f12, f36 = [], [], []
    for name in sorted(fleet.profiles):
        p = fleet.profiles[name]
        for t, y in list(zip(p.history_t, p.history_psi))[::stride]:
            psi.append((name, t, y))
        tab = fleet.tables[name]
        for t, f in zip(tab.time[::stride].tolist(), tab.features[::stride].tolist()):
            f12.append((name, t, f[0], f[1]))
            f36.append((name, t, *f[2:]))
    return {"psi_accum": psi, "f1_f2": f12, "f3_f6": f36}


def _trial_rng(seed: int, tag: str, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, int.from_bytes(tag.encode()[:4], "little"), k])


def _pick_pair(config: BusConfig, rng) -> tuple[str, str, int]:
    names = sorted(config.ecu_names())
    a, v = rng.choice(len(names), size=2, replace=False)
    attacker, victim = names[int(a)], names[int(v)]
    ids = sorted(m.frame_id for m in config.ecu(victim).messages if not m.forged)
    return attacker, victim, int(ids[int(rng.integers(len(ids)))])


def _thresholds_summary(fleet: FleetState) -> dict:
    return {f"0x{k:03X}": v.to_dict() for k, v in sorted(fleet.thresholds.items())}


def _separation(ups: dict) -> dict:
    names = sorted(ups)
    gaps = [abs(ups[a] - ups[b]) for i, a in enumerate(names) for b in names[i + 1:]]
    return {"min_pairwise_gap": min(gaps) if gaps else None}


# ---------------------------------------------------------------- scenarios

def _baseline(cfg: ExperimentConfig, bus: BusConfig, duration: float, n: int):
    fleet = learn_cached(bus, cfg.seed, duration, cfg.params)
    summary = {"profiles": _profile_summary(fleet), "separation": _separation(fleet.upsilons())}
    ups = fleet.upsilons()
    summary["self_match"] = {k: match_profile(u, ups, cfg.params.rel_tol, cfg.params.abs_tol).kind
                             for k, u in ups.items()}
    X = np.concatenate([fleet.tables[k].features for k in sorted(fleet.tables)])
    y = np.concatenate([[k] * len(fleet.tables[k]) for k in sorted(fleet.tables)])
    ds = classifier.InstanceDataset(X, y, np.ones(len(y), bool), FEATURES).split(cfg.params.train_fraction, cfg.seed)
    with stage("classifier"):
        model = classifier.train(ds, cfg.params.trees, cfg.seed)
        pred = model.predict(ds.features[~ds.train], FEATURES)
    summary["classifier_holdout_accuracy"] = float(np.mean(pred == ds.labels[~ds.train]))
    return summary, ConfusionMatrix(tuple(sorted(bus.ecu_names()))), [], fleet


def _timing_aware(cfg: ExperimentConfig, bus: BusConfig, duration: float, n: int):
    fleet = learn_cached(bus, cfg.seed, duration, cfg.params)
    model = train_model(fleet.tables, cfg.params, cfg.seed)
    cm = ConfusionMatrix(tuple(sorted(bus.ecu_names())))
    verdicts = []
    for k in range(n):
        rng = _trial_rng(cfg.seed, "tawa", k)
        attacker, victim, fid = _pick_pair(bus, rng)
        plan = AttackPlan(attacker, fid, adversary.TIMING_AWARE, victim, attack_start=0.0,
                          attack_stop=cfg.attack_window)
        with stage("adversary"):
            attacked = adversary.apply_timing_aware(plan, bus)
        with stage("bus-sim"):
            sim = run_scenario(attacked, int(rng.integers(2**31)), cfg.attack_window)
        inst = extract(sim.trace, fleet, cfg.params)
        v = identify(inst, fleet.profiles, model, cfg.params)
        cm.add(attacker, v.ecu)
        verdicts.append({"trial": k, "plan": plan.to_dict(), "verdict": v.to_dict(),
                         "correct": v.ecu == attacker})
    return {"profiles": _profile_summary(fleet)}, cm, verdicts, fleet


def _tva_arbitrary(cfg: ExperimentConfig, bus: BusConfig, duration: float, n: int):
    """Attacker drifts its supply to an arbitrary new level, then attacks; profiles are refreshed."""
    base = learn_cached(bus, cfg.seed, duration, cfg.params)
    cm = ConfusionMatrix(tuple(sorted(bus.ecu_names())))
    verdicts = []
    ramp_start, ramp_len, settle, refresh = 2.0, 6.0, 4.0, 8.0
    t_attack = ramp_start + ramp_len + settle + refresh
    for k in range(n):
        rng = _trial_rng(cfg.seed, "tvaa", k)
        attacker, victim, fid = _pick_pair(bus, rng)
        shift = float(rng.uniform(0.02, 0.06) * rng.choice([-1.0, 1.0]))
        plan = AttackPlan(attacker, fid, adversary.TVA, None, None, t_attack, t_attack + cfg.attack_window,
                          ramp_start, ramp_len, shift / ramp_len)
        with stage("adversary"):
            attacked = adversary.apply_tva(plan, bus)
        with stage("bus-sim"):
            sim = run_scenario(attacked, int(rng.integers(2**31)), t_attack + cfg.attack_window)
        inst = extract(sim.trace, base, cfg.params)
        recent = inst.select((inst.time >= t_attack - refresh) & (inst.time < t_attack))
        tabs = ecu_tables(recent, base.owner_map)
        profs = {name: make_profile(t, name, cfg.params) for name, t in tabs.items()}
        model = train_model(tabs, cfg.params, int(rng.integers(2**31)))
        v = identify(inst.select(inst.time >= t_attack), profs, model, cfg.params)
        cm.add(attacker, v.ecu)
        verdicts.append({"trial": k, "plan": plan.to_dict(), "verdict": v.to_dict(),
                         "correct": v.ecu == attacker})
    return {"profiles": _profile_summary(base)}, cm, verdicts, base


def targeted_dataset_run(bus: BusConfig, fleet: FleetState, n_attempts: int, seed: int,
                         params: PipelineParams, window: float = 5.0):
    """Evaluate Phase 3 + forced Phase 4 on the targeted-impersonation dataset."""
    names = tuple(sorted(bus.ecu_names()))
    cm = ConfusionMatrix(names)
    verdicts, plans = [], []
    forged = {n: min(m.frame_id for m in bus.ecu(n).messages if not m.forged) for n in names}
    with stage("adversary"):
        attempts = adversary.build_targeted_dataset(
            fleet.tables, {e.name: e.params for e in bus.ecus}, fleet.upsilons(), n_attempts, seed,
            bus.adc.lsb, bus.r_load, params.train_fraction, params.max_train_per_class, window,
            forged_ids=forged)
        for k, att in enumerate(attempts):
            profs = {n: make_profile(t, n, params) for n, t in att.fleet_tables.items()}
            ds = classifier.InstanceDataset(att.train_features, att.train_labels,
                                            np.ones(len(att.train_labels), bool), FEATURES)
            with stage("classifier"):
                model = classifier.train(ds, params.trees, int(np.random.SeedSequence([seed, k]).generate_state(1)[0]))
            v = identify(att.attack_table, profs, model, params, forced=True)
            cm.add(att.plan.attacker_ecu, v.ecu)
            plans.append(att.plan)
            verdicts.append({"attempt": k, "plan": att.plan.to_dict(), "verdict": v.to_dict(),
                             "correct": v.ecu == att.plan.attacker_ecu})
    return cm, verdicts, plans


def _tva_targeted(cfg: ExperimentConfig, bus: BusConfig, duration: float, n: int):
    fleet = learn_cached(bus, cfg.seed, duration, cfg.params)
    cm, verdicts, plans = targeted_dataset_run(bus, fleet, n, cfg.seed, cfg.params)
    phase3 = {}
    for v in verdicts:
        kind = v["verdict"]["kind"]
        phase3[kind] = phase3.get(kind, 0) + 1
    return {"profiles": _profile_summary(fleet), "phase3_match_kinds": phase3, "_plans": plans}, cm, verdicts, fleet


def cold_start(bus: BusConfig, seed: int, duration: float, params: PipelineParams, shift: float,
               attackers: int, window: float):
    """Two sessions; the second starts with a fleet-wide supply shift and attacks at once."""
    ref = learn_cached(bus, seed, duration, params)
    ref_ups = ref.upsilons()
    names = tuple(sorted(bus.ecu_names()))
    with stage("adversary"):
        shifted = adversary.fleet_supply_shift(bus, shift)
    sim2 = simulate_cached(shifted, seed + 1, duration)
    inst2 = extract(sim2.trace, ref, params)
    tabs2 = ecu_tables(inst2, ref.owner_map)
    pre = {n: make_profile(t, n, params).upsilon for n, t in tabs2.items()}
    recent = {n: t.features[:params.reference_size] for n, t in tabs2.items()}
    adjusted = ref.snapshot()
    with stage("profile"):
        adj = adjust_profiles(adjusted.profiles, recent)
    any_p = next(iter(adjusted.profiles.values()))
    nu = (any_p.cvd.nu_star_h, any_p.cvd.nu_star_l)
    post = {n: make_profile(t, n, params, nu_star=nu).upsilon for n, t in tabs2.items()}
    per_ecu = {}
    for n in names:
        per_ecu[n] = {
            "upsilon_reference": ref_ups[n], "upsilon_pre": pre[n], "upsilon_post": post[n],
            "rel_err_pre": abs(pre[n] - ref_ups[n]) / abs(ref_ups[n]),
            "rel_err_post": abs(post[n] - ref_ups[n]) / abs(ref_ups[n]),
            "self_match_pre": match_profile(pre[n], ref_ups, params.rel_tol, params.abs_tol).candidates == (n,),
            "self_match_post": match_profile(post[n], ref_ups, params.rel_tol, params.abs_tol).candidates == (n,),
        }
    cm_pre, cm_post = ConfusionMatrix(names), ConfusionMatrix(names)
    verdicts = []
    for k in range(attackers):
        rng = _trial_rng(seed, "cold", k)
        attacker, victim, fid = _pick_pair(bus, rng)
        plan = AttackPlan(attacker, fid, adversary.TVA, None, None, 0.0, window, fleet_shift=shift)
        with stage("adversary"):
            attacked = adversary.apply_tva(plan, bus)
        with stage("bus-sim"):
            sim = run_scenario(attacked, int(rng.integers(2**31)), window)
        inst = extract(sim.trace, ref, params)
        v_pre = identify(inst, ref.profiles, None, params)
        v_post = identify(inst, adjusted.profiles, None, params)
        cm_pre.add(attacker, v_pre.ecu)
        cm_post.add(attacker, v_post.ecu)
        verdicts.append({"trial": k, "plan": plan.to_dict(), "verdict_pre": v_pre.to_dict(),
                         "verdict": v_post.to_dict(), "correct": v_post.ecu == attacker})
    summary = {"profiles": _profile_summary(ref), "adjustment": {"delta": adj.delta, "applied": adj.applied,
                                                                 "skipped": list(adj.skipped), "nu_star": list(nu)},
               "per_ecu": per_ecu, "confusion_pre_adjustment": cm_pre.to_dict()}
    series = [(n, ref_ups[n], pre[n], post[n]) for n in names]
    return summary, cm_post, verdicts, ref, series


def _cold_start(cfg: ExperimentConfig, bus: BusConfig, duration: float, n: int):
    summary, cm, verdicts, ref, series = cold_start(bus, cfg.seed, duration, cfg.params, cfg.supply_shift,
                                                     n, cfg.attack_window)
    summary["_adjustment_series"] = series
    return summary, cm, verdicts, ref


_RUNNERS = {
    "baseline": _baseline,
    "timing_aware_attack": _timing_aware,
    "tva_arbitrary": _tva_arbitrary,
    "tva_targeted_dataset": _tva_targeted,
    "cold_start_adjust": _cold_start,
}


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Run one scenario end to end; identical inputs give an identical ``Report.summary``."""
    if cfg.scenario not in _RUNNERS:
        raise ValueError(f"unknown scenario {cfg.scenario!r}; choose from {SCENARIOS}")
    bus = cfg.bus_config()
    with stage("config"):
        bus.validate()
    d_dur, d_n = _DEFAULTS[cfg.scenario]
    duration = cfg.duration if cfg.duration is not None else d_dur
    n = cfg.trials if cfg.trials is not None else d_n
    t0 = time.perf_counter()
    body, cm, verdicts, fleet = _RUNNERS[cfg.scenario](cfg, bus, duration, n)
    elapsed = time.perf_counter() - t0
    adj_series = body.pop("_adjustment_series", [])
    plans = body.pop("_plans", None)
    summary = {
        "scenario": cfg.scenario, "fleet": cfg.fleet_label(), "seed": cfg.seed,
        "config_hash": config_hash(bus), "duration_s": duration, "trials": n,
        "params": dataclasses.asdict(cfg.params), "thresholds": _thresholds_summary(fleet),
        "verdicts": verdicts, "confusion": cm.to_dict(),
        "false_identification_rate": cm.false_identification_rate, **body,
    }
    series = _series_from_fleet(fleet)
    series["adjustment"] = adj_series
    series["confusion"] = [(a, p, int(cm.counts[i, j])) for i, a in enumerate(cm.labels)
                           for j, p in enumerate(cm.columns) if cm.counts[i, j]]
    report = Report(summary, series, {"wall_clock_s": elapsed, "trials": n,
                                      "per_trial_s": elapsed / n if n else None})
    if cfg.out_dir:
        write_report(report, cfg.out_dir)
        if plans is not None:
            adversary.save_manifest(Path(cfg.out_dir) / "manifest.json", plans)
    return report


def run_all(cfg: ExperimentConfig, scenarios: Sequence[str] = SCENARIOS) -> dict[str, Report]:
    out = {}
    for s in scenarios:
        sub = dataclasses.replace(cfg, scenario=s,
                                  out_dir=str(Path(cfg.out_dir) / s) if cfg.out_dir else None)
        out[s] = run_experiment(sub)
    return out
