"""Attacker models and the targeted-impersonation dataset builder.

Plans are pure transformations of a :class:`BusConfig`: a naive or
timing-aware attacker gains a forged message stream, a timing-voltage-aware
attacker additionally ramps its own supply voltage.  The dataset builder
works on recorded voltage instances, shifting the attacker's instances
steadily towards a victim before it attacks.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .bus import (ISO_H, ISO_L, BusConfig, EcuElectricalParams, MessageSpec, ParameterError,
                  SupplyRamp, dominant_voltage)
from .instance import InstanceTable

NAIVE = "naive"
TIMING_AWARE = "timing_aware"
TVA = "timing_voltage_aware"
KINDS = (NAIVE, TIMING_AWARE, TVA)


@dataclass(frozen=True)
class AttackPlan:
    """One attack.  ``timing`` is a (min, max) interval law; ``None`` copies the owner's.

    ``shift_trajectory`` is the attacker's supply ramp rate in V/s, applied
    for ``shift_duration`` seconds from ``shift_start``.
    """

    attacker_ecu: str
    forged_id: int
    kind: str = NAIVE
    victim_ecu: Optional[str] = None
    timing: Optional[tuple[float, float]] = None
    attack_start: float = 0.0
    attack_stop: Optional[float] = None
    shift_start: float = 0.0
    shift_duration: float = 0.0
    shift_trajectory: float = 0.0
    fleet_shift: float = 0.0

    @property
    def shift_delta(self) -> float:
        return self.shift_trajectory * self.shift_duration

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["forged_id"] = f"0x{self.forged_id:03X}"
        d["timing"] = list(self.timing) if self.timing is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackPlan":
        d = dict(d)
        if isinstance(d["forged_id"], str):
            d["forged_id"] = int(d["forged_id"], 16)
        if d.get("timing") is not None:
            d["timing"] = tuple(d["timing"])
        return cls(**d)


def _check(plan: AttackPlan, config: BusConfig, kind: str) -> None:
    if plan.kind != kind:
        raise ValueError(f"plan kind is {plan.kind!r}, expected {kind!r}")
    if plan.attacker_ecu not in config.ecu_names():
        raise ValueError(f"unknown attacker {plan.attacker_ecu!r}")
    owner = config.owner_of(plan.forged_id)
    if owner is None:
        raise ValueError(f"0x{plan.forged_id:X} has no legitimate sender")
    if owner == plan.attacker_ecu:
        raise ValueError(f"0x{plan.forged_id:X} already belongs to the attacker")
    if plan.attack_stop is not None and plan.attack_stop < plan.attack_start:
        raise ValueError("attack_stop precedes attack_start")
    if kind == TVA and plan.shift_start > plan.attack_start:
        raise ValueError("shift_start must not follow attack_start")


def _owner_law(config: BusConfig, frame_id: int) -> tuple[float, float]:
    for m in config.ecu(config.owner_of(frame_id)).messages:
        if m.frame_id == frame_id and not m.forged:
            return m.interval_min, m.interval_max
    raise KeyError(frame_id)


def _inject(plan: AttackPlan, config: BusConfig, law: tuple[float, float]) -> BusConfig:
    att = config.ecu(plan.attacker_ecu)
    stop = plan.attack_stop
    if stop is not None and stop <= plan.attack_start:
        return config
    spec = MessageSpec(plan.forged_id, law[0], law[1], start=plan.attack_start, stop=stop, forged=True)
    return config.replace_ecu(dataclasses.replace(att, messages=att.messages + (spec,)))


def apply_naive(plan: AttackPlan, config: BusConfig) -> BusConfig:
    """Forged frames at uniformly random intervals from the plan's law (default 10-20 ms)."""
    _check(plan, config, NAIVE)
    return _inject(plan, config, plan.timing or (0.010, 0.020))


def apply_timing_aware(plan: AttackPlan, config: BusConfig) -> BusConfig:
    """Forged frames following the owner's interval law unless the plan gives one."""
    _check(plan, config, TIMING_AWARE)
    return _inject(plan, config, plan.timing or _owner_law(config, plan.forged_id))


def fleet_supply_shift(config: BusConfig, delta_vcc: float, start: float = 0.0,
                       duration: float = 0.0) -> BusConfig:
    """Shift every ECU's supply by ``delta_vcc`` (a step when ``duration`` is 0)."""
    if delta_vcc == 0:
        return config
    ecus = tuple(dataclasses.replace(e, ramps=e.ramps + (SupplyRamp(start, duration, delta_vcc),))
                 for e in config.ecus)
    out = dataclasses.replace(config, ecus=ecus)
    for e in out.ecus:
        _check_iso(e.params, sum(r.delta_vcc for r in e.ramps), config.r_load)
    return out


def _check_iso(p: EcuElectricalParams, delta: float, r_load: float) -> None:
    h, l = dominant_voltage(dataclasses.replace(p, vcc=p.vcc + delta), r_load)
    if not (ISO_H[0] <= h <= ISO_H[1] and ISO_L[0] <= l <= ISO_L[1]):
        raise ParameterError(f"supply shift {delta:+.3f} V drives levels ({h:.3f}, {l:.3f}) outside ISO bounds")


def apply_tva(plan: AttackPlan, config: BusConfig) -> BusConfig:
    """Timing-aware injection plus a supply ramp on the attacker (and an optional fleet shift)."""
    _check(plan, config, TVA)
    config = fleet_supply_shift(config, plan.fleet_shift)
    if plan.shift_delta != 0:
        att = config.ecu(plan.attacker_ecu)
        total = sum(r.delta_vcc for r in att.ramps) + plan.shift_delta
        _check_iso(att.params, total, config.r_load)
        ramp = SupplyRamp(plan.shift_start, plan.shift_duration, plan.shift_delta)
        config = config.replace_ecu(dataclasses.replace(att, ramps=att.ramps + (ramp,)))
    return _inject(plan, config, plan.timing or _owner_law(config, plan.forged_id))


def apply_plan(plan: AttackPlan, config: BusConfig) -> BusConfig:
    return {NAIVE: apply_naive, TIMING_AWARE: apply_timing_aware, TVA: apply_tva}[plan.kind](plan, config)


def supply_gains(p: EcuElectricalParams, r_load: float = 60.0) -> tuple[float, float]:
    """dV_CANH/dVcc and dV_CANL/dVcc of one driver."""
    total = p.r_dson_p + p.r_dson_n + r_load
    return 1.0 - p.r_dson_p / total, p.r_dson_n / total


def profile_sensitivity(p: EcuElectricalParams, r_load: float = 60.0, time_scale: float = 1.0,
                        nu_star: tuple[float, float] = (3.5, 1.5)) -> float:
    """d(upsilon)/d(Vcc) for a driver: three H and three L features move with the supply."""
    gh, gl = supply_gains(p, r_load)
    return -3.0 * (gh / nu_star[0] + gl / nu_star[1]) * 1e3 * time_scale


def supply_shift_to_match(p: EcuElectricalParams, attacker_upsilon: float, victim_upsilon: float,
                          r_load: float = 60.0) -> float:
    """Supply change that moves the attacker's profile onto the victim's."""
    return (victim_upsilon - attacker_upsilon) / profile_sensitivity(p, r_load)


# ---------------------------------------------------------------- targeted dataset

@dataclass(frozen=True)
class Attempt:
    """One targeted impersonation: the plan plus the instance-level material it produces."""

    plan: AttackPlan
    train_features: np.ndarray
    train_labels: np.ndarray
    attack_table: InstanceTable
    fleet_tables: dict


def shift_instances(features: np.ndarray, times: np.ndarray, gains: tuple[float, float], delta: float,
                    start: float, duration: float, lsb: float) -> np.ndarray:
    """Move instances along a linear supply ramp; the modes F1/F2 stay on ADC codes."""
    frac = np.clip((times - start) / duration, 0.0, 1.0) if duration > 0 else (times >= start).astype(float)
    d = delta * frac
    out = np.array(features, dtype=float, copy=True)
    out[:, 0::2] += gains[0] * d[:, None]
    out[:, 1::2] += gains[1] * d[:, None]
    out[:, :2] = np.rint(out[:, :2] / lsb) * lsb
    return out


def build_targeted_dataset(fleet_instances: Mapping[str, InstanceTable], fleet_params: Mapping[str, EcuElectricalParams],
                           fleet_upsilon: Mapping[str, float], n_attempts: int = 1000, seed: int = 0,
                           lsb: float = 5.0 / 1023, r_load: float = 60.0, train_fraction: float = 0.5,
                           max_train_per_class: Optional[int] = 80, attack_window: float = 5.0,
                           shift_start: tuple[float, float] = (60.0, 90.0),
                           ramp: tuple[float, float] = (30.0, 120.0), forged_ids: Mapping[str, int] | None = None, recent_cap: bool = True):
    """Yield ``n_attempts`` targeted impersonation attempts built from recorded instances.

    For each attempt an attacker and a different victim are drawn, then a
    shift start, a ramp length and an attack start no earlier than half way
    through the ramp.  The attacker's instances from the shift start on are
    moved along the supply ramp that makes its profile equal the victim's.
    Its instances inside the attack window become the attack instances; a
    random ``train_fraction`` of all instances before the attack (capped per
    ECU) is the training set.
    """
    if n_attempts < 1:
        raise ValueError("n_attempts must be at least 1")
    names = sorted(fleet_instances)
    if len(names) < 2:
        raise ValueError("need instance data of at least two ECUs")
    tables = {n: fleet_instances[n].sorted() for n in names}
    horizon = min(float(t.time[-1]) for t in tables.values())
    children = np.random.SeedSequence(seed).spawn(n_attempts)
    for k in range(n_attempts):
        rng = np.random.default_rng(children[k])
        a, v = rng.choice(len(names), size=2, replace=False)
        attacker, victim = names[int(a)], names[int(v)]
        s = float(rng.uniform(*shift_start))
        r = float(rng.uniform(*ramp))
        t_a = float(rng.uniform(s + 0.5 * r, s + r + 30.0))
        t_a = min(t_a, horizon - attack_window)
        if t_a < s + 0.5 * r:
            raise ValueError("recorded instances are too short for the requested timing")
        p = fleet_params[attacker]
        delta = supply_shift_to_match(p, fleet_upsilon[attacker], fleet_upsilon[victim], r_load)
        fid = (forged_ids or {}).get(victim, 0)
        plan = AttackPlan(attacker, fid, TVA, victim, None, t_a, t_a + attack_window, s, r, delta / r)

        shifted = dict(tables)
        at = tables[attacker]
        shifted[attacker] = InstanceTable(at.time, shift_instances(at.features, at.time, supply_gains(p, r_load),
                                                                   delta, s, r, lsb), at.message_id, at.attack)
        feats, labels = [], []
        for n in names:
            tab = shifted[n]
            pre = np.flatnonzero(tab.time < t_a)
            take = rng.random(pre.size) < train_fraction
            idx = pre[take]
            if max_train_per_class is not None and idx.size > max_train_per_class:
                idx = idx[-max_train_per_class:] if recent_cap else \
                    np.sort(rng.choice(idx, size=max_train_per_class, replace=False))
            feats.append(tab.features[idx])
            labels.extend([n] * idx.size)
        win = (shifted[attacker].time >= t_a) & (shifted[attacker].time < t_a + attack_window)
        atk = shifted[attacker].select(win)
        atk = InstanceTable(atk.time, atk.features, np.full(len(atk), fid, np.int32), np.ones(len(atk), bool))
        yield Attempt(plan, np.concatenate(feats), np.array(labels), atk,
                      {n: shifted[n].select(shifted[n].time < t_a) for n in names})


def save_manifest(path: str | Path, plans: Sequence[AttackPlan], extra: Sequence[dict] | None = None) -> None:
    rows = []
    for i, p in enumerate(plans):
        row = {"attempt": i, "ground_truth_attacker": p.attacker_ecu, **p.to_dict()}
        if extra is not None:
            row.update(extra[i])
        rows.append(row)
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)


def load_manifest(path: str | Path) -> list[AttackPlan]:
    with open(path) as fh:
        rows = json.load(fh)
    fields = {f.name for f in dataclasses.fields(AttackPlan)}
    return [AttackPlan.from_dict({k: v for k, v in r.items() if k in fields}) for r in rows]
