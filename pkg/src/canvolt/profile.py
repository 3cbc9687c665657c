"""Voltage profiles: slow fingerprints built from instance streams.

Every instance updates six cumulative voltage deviations (CVDs), one per
feature, that integrate ``1 - value/nominal`` over elapsed time.  Summing the
six cancels opposite-direction CANH/CANL transients.  The summed CVD grows
linearly in time for a stationary ECU, and its slope (fitted by recursive
least squares through the origin) is the profile ``upsilon``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numba
import numpy as np

from .instance import InstanceTable

NU_STAR_H = 3.5
NU_STAR_L = 1.5
H_FEATURES = np.array([True, False, True, False, True, False])
# nominal sensitivity of the CANH / CANL dominant level to the supply voltage
SUPPLY_GAINS = (0.75, 0.25)


class OrderingError(ValueError):
    """Instance timestamps must strictly increase within a profile."""


class NotEnoughInstances(ValueError):
    """Too few instances to build or resolve a profile."""


@dataclass
class CvdState:
    """Cumulative deviations of the six features.

    ``time_scale`` converts elapsed seconds into the CVD time unit.  With the
    default of 1.0 the CVDs integrate over seconds while the regression clock
    runs in kiloseconds, so ``upsilon`` is about ``1000 * sum(1 - v/v*)``.
    """

    cvd: np.ndarray = field(default_factory=lambda: np.zeros(6))
    nu_star_h: float = NU_STAR_H
    nu_star_l: float = NU_STAR_L
    last_step_time: Optional[float] = None
    time_scale: float = 1.0

    @property
    def nu_star(self) -> np.ndarray:
        return np.where(H_FEATURES, self.nu_star_h, self.nu_star_l)

    def increments(self, features, step_time: float) -> np.ndarray:
        if self.last_step_time is None:
            raise OrderingError("no reference time yet")
        if not step_time > self.last_step_time:
            raise OrderingError(f"step time {step_time} not after {self.last_step_time}")
        delta = (step_time - self.last_step_time) * self.time_scale
        return delta * (1.0 - np.asarray(features, dtype=float) / self.nu_star)


def cvd_update(state: CvdState, features, step_time: float) -> CvdState:
    """Return the state after one instance (the input state is left untouched)."""
    inc = state.increments(features, step_time)
    return CvdState(state.cvd + inc, state.nu_star_h, state.nu_star_l, step_time, state.time_scale)


@dataclass
class VoltageProfile:
    """CVD state plus a one-parameter RLS fit of the summed CVD against time.

    The first instance only fixes the clock origin.  ``psi_accum`` is the sum
    of the six CVDs and ``psi`` the latest per-step change of that sum.
    """

    name: str = ""
    cvd: CvdState = field(default_factory=CvdState)
    forgetting: float = 1.0
    upsilon: float = float("nan")
    rls_gain: float = float("nan")
    psi: float = 0.0
    psi_accum: float = 0.0
    sample_count: int = 0
    t_origin: Optional[float] = None
    t_last: float = 0.0
    sum_ty: float = 0.0
    sum_tt: float = 0.0
    keep_history: bool = True
    history_t: list = field(default_factory=list, repr=False)
    history_psi: list = field(default_factory=list, repr=False)
    reference: Optional[np.ndarray] = field(default=None, repr=False)
    _awaiting_anchor: bool = field(default=False, repr=False)

    # -- streaming -------------------------------------------------------------------
    def update(self, features, step_time: float) -> None:
        self.consume_arrays(np.array([float(step_time)]), np.atleast_2d(np.asarray(features, float)))

    def consume(self, table: InstanceTable) -> "VoltageProfile":
        order = np.argsort(table.time, kind="stable")
        return self.consume_arrays(table.time[order], table.features[order])

    def consume_arrays(self, times: np.ndarray, features: np.ndarray) -> "VoltageProfile":
        times = np.ascontiguousarray(times, dtype=float)
        features = np.ascontiguousarray(features, dtype=float)
        st = np.array([self.t_origin is not None, np.nan if self.t_origin is None else self.t_origin,
                       np.nan if self.cvd.last_step_time is None else self.cvd.last_step_time,
                       self._awaiting_anchor, self.upsilon, self.rls_gain, self.sum_ty, self.sum_tt,
                       self.t_last, self.psi, self.psi_accum, self.sample_count], dtype=float)
        cvd = self.cvd.cvd.astype(float).copy()
        hist = np.empty((times.size, 2))
        n_hist, bad = _run_profile(times, features, self.cvd.nu_star, self.cvd.time_scale,
                                   self.forgetting, st, cvd, hist)
        self.cvd.cvd = cvd
        self.t_origin = float(st[1]) if st[0] else None
        self.cvd.last_step_time = None if np.isnan(st[2]) else float(st[2])
        self._awaiting_anchor = bool(st[3])
        self.upsilon, self.rls_gain, self.sum_ty, self.sum_tt = map(float, st[4:8])
        self.t_last, self.psi, self.psi_accum = map(float, st[8:11])
        self.sample_count = int(st[11])
        if self.keep_history:
            self.history_t.extend(hist[:n_hist, 0].tolist())
            self.history_psi.extend(hist[:n_hist, 1].tolist())
        if bad >= 0:
            raise OrderingError(f"instance time {times[bad]} does not follow {self.cvd.last_step_time}")
        return self

    def resume(self) -> None:
        """Mark a restart: keep the fit, re-anchor the clock on the next instance."""
        if self.t_origin is not None:
            self._awaiting_anchor = True

    def rls_update(self, t: float, y: float) -> None:
        """One RLS step of ``y = upsilon * t`` (t in kiloseconds) outside the CVD path."""
        st = np.array([self.upsilon, self.rls_gain, self.sum_ty, self.sum_tt, self.t_last])
        if _rls_step(st, float(t), float(y), self.forgetting) < 0:
            raise OrderingError("regression time must increase")
        self.upsilon, self.rls_gain, self.sum_ty, self.sum_tt, self.t_last = map(float, st)

    # -- oracles / diagnostics ---------------------------------------------------------
    @property
    def upsilon_ols(self) -> float:
        """Closed-form weighted least squares slope from running sums."""
        return self.sum_ty / self.sum_tt if self.sum_tt > 0 else float("nan")

    def linearity_r2(self) -> float:
        t, y = np.asarray(self.history_t), np.asarray(self.history_psi)
        if t.size < 3:
            return float("nan")
        a, b = np.polyfit(t, y, 1)
        ss_res = np.sum((y - (a * t + b)) ** 2)
        ss_tot = np.sum((y - y.mean()) ** 2)
        return float(1 - ss_res / ss_tot) if ss_tot > 0 else 1.0

    # -- persistence -------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "ecu_id": self.name, "upsilon": self.upsilon, "psi_accum": self.psi_accum,
            "nu_star_h": self.cvd.nu_star_h, "nu_star_l": self.cvd.nu_star_l,
            "rls_gain": self.rls_gain, "sample_count": self.sample_count, "t_origin": self.t_origin,
            "cvd": self.cvd.cvd.tolist(), "last_step_time": self.cvd.last_step_time,
            "time_scale": self.cvd.time_scale, "forgetting": self.forgetting, "t_last": self.t_last,
            "sum_ty": self.sum_ty, "sum_tt": self.sum_tt, "psi": self.psi,
            "reference_instances": [] if self.reference is None else self.reference.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoltageProfile":
        cvd = CvdState(np.array(d.get("cvd", [0.0] * 6), dtype=float), d["nu_star_h"], d["nu_star_l"],
                       d.get("last_step_time"), d.get("time_scale", 1.0))
        ref = d.get("reference_instances") or None
        return cls(name=d["ecu_id"], cvd=cvd, forgetting=d.get("forgetting", 1.0),
                   upsilon=_f(d["upsilon"]), rls_gain=_f(d["rls_gain"]), psi=d.get("psi", 0.0),
                   psi_accum=d["psi_accum"], sample_count=d["sample_count"], t_origin=d["t_origin"],
                   t_last=d.get("t_last", 0.0), sum_ty=d.get("sum_ty", 0.0), sum_tt=d.get("sum_tt", 0.0),
                   reference=None if ref is None else np.array(ref, dtype=float))


@numba.njit(cache=True)
def _rls_step(st, t, y, lam):
    """st = [upsilon, gain, sum_ty, sum_tt, t_last]; returns 0, 1 (skipped) or -1."""
    if t <= 0:
        return 1
    if st[3] > 0 and t <= st[4]:
        return -1
    st[2] = lam * st[2] + t * y
    st[3] = lam * st[3] + t * t
    if not np.isfinite(st[1]):
        # exact initialisation: the first regressor alone fixes the slope
        st[1] = 1.0 / (t * t)
        st[0] = y / t
    else:
        p = st[1]
        k = p * t / (lam + t * p * t)
        st[0] = st[0] + k * (y - t * st[0])
        st[1] = (p - k * t * p) / lam
    st[4] = t
    return 0


@numba.njit(cache=True)
def _run_profile(times, feats, nu_star, time_scale, lam, st, cvd, hist):
    # st = [origin_set, t_origin, last_time, awaiting_anchor, upsilon, gain,
    #       sum_ty, sum_tt, t_last, psi, psi_accum, count]
    rls = np.empty(5)
    n_hist = 0
    for i in range(times.size):
        t = times[i]
        if st[0] == 0.0:
            st[0] = 1.0
            st[1] = t
            st[2] = t
            st[11] += 1
            continue
        if st[3] != 0.0:
            st[1] = t - st[8] * 1000.0
            st[2] = t
            st[3] = 0.0
            st[11] += 1
            continue
        if not t > st[2]:
            return n_hist, i
        delta = (t - st[2]) * time_scale
        psi = 0.0
        for x in range(6):
            inc = delta * (1.0 - feats[i, x] / nu_star[x])
            cvd[x] += inc
            psi += inc
        acc = 0.0
        for x in range(6):
            acc += cvd[x]
        st[2] = t
        st[9] = psi
        st[10] = acc
        st[11] += 1
        for q in range(5):
            rls[q] = st[4 + q]
        tk = (t - st[1]) / 1000.0
        if _rls_step(rls, tk, acc, lam) == 0:
            hist[n_hist, 0] = tk
            hist[n_hist, 1] = acc
            n_hist += 1
        for q in range(5):
            st[4 + q] = rls[q]
    return n_hist, -1


def _f(x) -> float:
    return float("nan") if x is None else float(x)


def build_profile(table: InstanceTable, name: str = "", time_scale: float = 1.0,
                  forgetting: float = 1.0, nu_star=(NU_STAR_H, NU_STAR_L)) -> VoltageProfile:
    p = VoltageProfile(name=name, cvd=CvdState(nu_star_h=nu_star[0], nu_star_l=nu_star[1],
                                               time_scale=time_scale), forgetting=forgetting)
    return p.consume(table)


def build_intrusion_profile(table: InstanceTable, **kw) -> VoltageProfile:
    """Profile over IDS-flagged instances only, with its own clock origin."""
    flagged = table.select(table.attack)
    if len(flagged) < 2 or np.unique(flagged.time).size < 2:
        raise NotEnoughInstances("need at least two flagged instances at distinct times")
    return build_profile(flagged, name="intrusion", **kw)


@dataclass(frozen=True)
class MatchResult:
    kind: str  # "unique", "ambiguous" or "unknown"
    candidates: tuple[str, ...]

    @property
    def ecu(self) -> Optional[str]:
        return self.candidates[0] if self.kind == "unique" else None


def match_profile(target: float, fleet: Mapping[str, float], rel_tol: float = 0.1,
                  abs_tol: float = 2.0) -> MatchResult:
    """Fleet members whose profile lies within tolerance of ``target``."""
    if not fleet:
        raise ValueError("empty fleet")
    if isinstance(target, VoltageProfile):
        target = target.upsilon
    vals = {k: (v.upsilon if isinstance(v, VoltageProfile) else float(v)) for k, v in fleet.items()}
    cands = tuple(sorted(k for k, u in vals.items()
                         if abs(u - target) <= max(abs_tol, rel_tol * abs(u))))
    kind = "unknown" if not cands else "unique" if len(cands) == 1 else "ambiguous"
    return MatchResult(kind, cands)


def supply_estimate(features) -> np.ndarray:
    """(F3+F4+F5+F6)/2 per instance; equals the supply voltage for a symmetric driver."""
    f = np.atleast_2d(np.asarray(features, dtype=float))
    return f[:, 2:6].sum(axis=1) / 2.0


@dataclass(frozen=True)
class Adjustment:
    delta: dict
    applied: dict
    skipped: tuple


def adjust_profiles(fleet: Mapping[str, VoltageProfile], recent: Mapping[str, np.ndarray],
                    reference: Mapping[str, np.ndarray] | None = None, per_ecu: bool = False,
                    line_gains: tuple[float, float] = SUPPLY_GAINS) -> Adjustment:
    """Shift the nominal levels of every profile by the estimated supply change.

    For each ECU the supply shift is the mean estimate over ``recent``
    instances minus that over the reference instances (taken from the profile
    when ``reference`` is not given).  The fleet mean shift is applied to all
    profiles, or each ECU's own shift when ``per_ecu`` is set.  CANH nominals
    move by ``line_gains[0]`` times the shift and CANL by ``line_gains[1]``;
    gains of (1, 1) add the raw shift to both.
    """
    delta, skipped = {}, []
    for name, prof in fleet.items():
        ref = reference.get(name) if reference is not None else prof.reference
        rec = recent.get(name)
        if ref is None or rec is None or len(ref) == 0 or len(rec) == 0:
            skipped.append(name)
            continue
        delta[name] = float(supply_estimate(rec).mean() - supply_estimate(ref).mean())
    if skipped:
        warnings.warn(f"no adjustment data for {sorted(skipped)}", stacklevel=2)
    if not delta:
        return Adjustment({}, {}, tuple(sorted(skipped)))
    common = float(np.mean(list(delta.values())))
    applied = {}
    for name, prof in fleet.items():
        d = delta.get(name, common) if per_ecu else common
        prof.cvd.nu_star_h += line_gains[0] * d
        prof.cvd.nu_star_l += line_gains[1] * d
        applied[name] = d
    return Adjustment(delta, applied, tuple(sorted(skipped)))


def save_fleet(path: str | Path, fleet: Mapping[str, VoltageProfile]) -> None:
    with open(path, "w") as fh:
        json.dump([p.to_dict() for p in fleet.values()], fh, indent=2)


def load_fleet(path: str | Path) -> dict[str, VoltageProfile]:
    with open(path) as fh:
        return {d["ecu_id"]: VoltageProfile.from_dict(d) for d in json.load(fh)}
