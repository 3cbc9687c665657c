"""Voltage instances: momentary summaries of one transmitter's output.

Each instance holds six features.  F1/F2 are the modes of the latest batch of
kappa non-ACK CANH/CANL values.  F3..F6 are tracking points that follow the
75th/90th percentiles of CANH and the 25th/10th percentiles of CANL over a
sliding window of kappa*R values.  The trackers move by a cubic step toward
their target percentile instead of being recomputed from the window, which
keeps them steady under short transients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numba
import numpy as np

from .acklearn import EPS, H_MIN, L_MAX, AckThresholds
from .trace import LINE_H, LINE_L, Trace

# (line, target percentile) of F3, F4, F5, F6
TRACKED = ((LINE_H, 0.75), (LINE_L, 0.25), (LINE_H, 0.9), (LINE_L, 0.1))
FEATURES = ("f1", "f2", "f3", "f4", "f5", "f6")
NORMAL, ATTACK = "normal", "ids-flagged-attack"


def filter_non_ack(values, line: int, thr: AckThresholds) -> np.ndarray:
    """Transmitter-driven dominant values: drop recessive and ACK levels."""
    v = np.asarray(values, dtype=float)
    if line == LINE_H:
        return v[(v >= H_MIN) & (v < thr.gamma_h - EPS)]
    return v[(v > thr.gamma_l + EPS) & (v <= L_MAX)]


def update_dispersion(window, lam: float, p_star: float, alpha: float) -> float:
    """One cubic correction of tracking point ``lam`` toward percentile ``p_star``."""
    w = np.asarray(window, dtype=float)
    below = np.count_nonzero(w < lam) / w.size
    return float(lam + alpha * (p_star - below) ** 3)


def exact_percentile(values, p: float) -> float:
    """Inverted-CDF percentile: smallest value whose empirical CDF reaches ``p``."""
    s = np.sort(np.asarray(values, dtype=float))
    return float(s[_icdf_index(s.size, p)])


@numba.njit(cache=True)
def _icdf_index(n, p):
    k = int(np.ceil(n * p - 1e-9)) - 1
    return min(max(k, 0), n - 1)


@numba.njit(cache=True)
def _mode(vals, lsb):
    codes = np.sort(np.rint(vals / lsb))
    n = codes.size
    if n % 2 == 1:
        med = codes[n // 2]
    else:
        med = 0.5 * (codes[n // 2 - 1] + codes[n // 2])
    best, best_n, best_d = codes[0], 0, np.inf
    i = 0
    while i < n:
        j = i
        while j < n and codes[j] == codes[i]:
            j += 1
        c = j - i
        d = abs(codes[i] - med)
        if c > best_n or (c == best_n and d < best_d):
            best, best_n, best_d = codes[i], c, d
        i = j
    return best * lsb


@numba.njit(cache=True)
def _run(lines, vals, times, kappa, kr, alpha, lsb, targets, tr_line,
         ring, pos, seen, pend, npend, lam, out):
    cap = pend.shape[1]
    n_out = 0
    for i in range(vals.size):
        ln = lines[i]
        ring[ln, pos[ln]] = vals[i]
        pos[ln] = (pos[ln] + 1) % kr
        seen[ln] += 1
        if seen[ln] == kr:
            s = np.sort(ring[ln])
            for k in range(4):
                if tr_line[k] == ln:
                    lam[k] = s[_icdf_index(kr, targets[k])]
            continue
        if seen[ln] < kr:
            continue
        if npend[ln] == cap:
            pend[ln, :cap - 1] = pend[ln, 1:]
            npend[ln] -= 1
        pend[ln, npend[ln]] = vals[i]
        npend[ln] += 1
        while npend[0] >= kappa and npend[1] >= kappa:
            out[n_out, 0] = times[i]
            out[n_out, 1] = _mode(pend[0, :kappa], lsb)
            out[n_out, 2] = _mode(pend[1, :kappa], lsb)
            for q in range(2):
                rest = npend[q] - kappa
                pend[q, :rest] = pend[q, kappa:npend[q]].copy()
                npend[q] = rest
            for k in range(4):
                w = ring[tr_line[k]]
                below = 0
                for x in w:
                    if x < lam[k]:
                        below += 1
                e = targets[k] - below / kr
                v = lam[k] + alpha * e * e * e
                v = min(max(v, w.min()), w.max())
                lam[k] = v
                out[n_out, 3 + k] = v
            n_out += 1
    return n_out


@dataclass(frozen=True)
class VoltageInstance:
    f1: float
    f2: float
    f3: float
    f4: float
    f5: float
    f6: float
    step_time: float
    message_id: int
    source_label: str = NORMAL

    @property
    def features(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4, self.f5, self.f6])


@dataclass
class InstanceTable:
    """Columnar instances of one or more streams, sorted by time within a stream."""

    time: np.ndarray
    features: np.ndarray  # (n, 6)
    message_id: np.ndarray
    attack: np.ndarray

    def __len__(self) -> int:
        return len(self.time)

    @classmethod
    def empty(cls) -> "InstanceTable":
        return cls(np.zeros(0), np.zeros((0, 6)), np.zeros(0, np.int32), np.zeros(0, bool))

    @classmethod
    def concat(cls, parts: Iterable["InstanceTable"]) -> "InstanceTable":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.time for p in parts]),
                   np.concatenate([p.features for p in parts]),
                   np.concatenate([p.message_id for p in parts]),
                   np.concatenate([p.attack for p in parts]))

    def select(self, mask) -> "InstanceTable":
        return InstanceTable(self.time[mask], self.features[mask], self.message_id[mask], self.attack[mask])

    def sorted(self) -> "InstanceTable":
        return self.select(np.argsort(self.time, kind="stable"))

    def rows(self) -> list[VoltageInstance]:
        return [VoltageInstance(*map(float, f), step_time=float(t), message_id=int(m),
                                source_label=ATTACK if a else NORMAL)
                for t, f, m, a in zip(self.time, self.features, self.message_id, self.attack)]

    @classmethod
    def from_rows(cls, rows: list[VoltageInstance]) -> "InstanceTable":
        if not rows:
            return cls.empty()
        return cls(np.array([r.step_time for r in rows]), np.array([r.features for r in rows]),
                   np.array([r.message_id for r in rows], dtype=np.int32),
                   np.array([r.source_label == ATTACK for r in rows]))


@dataclass
class DispersionTracker:
    """Streaming instance extractor for a single message stream."""

    lsb: float
    kappa: int = 15
    r: int = 10
    alpha: float = 0.02
    message_id: int = 0
    attack: bool = False
    pending_cap: int = 0
    _state: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.kappa < 1 or self.r < 1:
            raise ValueError("kappa and r must be positive")
        kr = self.kappa * self.r
        cap = self.pending_cap or max(kr, 4 * self.kappa)
        self._state = (np.zeros((2, kr)), np.zeros(2, np.int64), np.zeros(2, np.int64),
                       np.zeros((2, cap)), np.zeros(2, np.int64), np.full(4, np.nan))

    @property
    def tracking_points(self) -> np.ndarray:
        return self._state[5].copy()

    def window(self, line: int) -> np.ndarray:
        ring, pos, seen = self._state[0], self._state[1], self._state[2]
        w = np.roll(ring[line], -pos[line])
        return w[-min(int(seen[line]), w.size):]

    @property
    def warmed_up(self) -> bool:
        return bool((self._state[2] >= self.kappa * self.r).all())

    def push(self, lines, values, times) -> InstanceTable:
        lines = np.asarray(lines, dtype=np.int8)
        values = np.asarray(values, dtype=float)
        times = np.asarray(times, dtype=float)
        if times.shape != values.shape:
            times = np.broadcast_to(times, values.shape).astype(float)
        out = np.empty(((values.size + 2 * self._state[3].shape[1]) // self.kappa + 2, 7))
        targets = np.array([p for _, p in TRACKED])
        tr_line = np.array([ln for ln, _ in TRACKED], dtype=np.int8)
        n = _run(lines, values, times, self.kappa, self.kappa * self.r, self.alpha, self.lsb,
                 targets, tr_line, *self._state, out)
        out = out[:n]
        return InstanceTable(out[:, 0].copy(), out[:, 1:].copy(),
                             np.full(n, self.message_id, np.int32), np.full(n, self.attack))

    def push_samples(self, h_values, l_values, time: float) -> Optional[VoltageInstance]:
        """Feed one batch of filtered values per line; return the newest instance, if any."""
        h, l = np.asarray(h_values, float), np.asarray(l_values, float)
        lines = np.concatenate([np.full(h.size, LINE_H), np.full(l.size, LINE_L)])
        tab = self.push(lines, np.concatenate([h, l]), time)
        return tab.rows()[-1] if len(tab) else None


def stream_values(trace: Trace, message_id: int, attack: bool, thr: AckThresholds):
    """Non-ACK dominant (line, volts, time) rows of one (ID, IDS flag) stream."""
    sel = (trace.frame_id == message_id) & (trace.ids_flag == attack)
    v, ln, t = trace.volts[sel], trace.line[sel], trace.time[sel]
    keep = np.where(ln == LINE_H, (v >= H_MIN) & (v < thr.gamma_h - EPS),
                    (v > thr.gamma_l + EPS) & (v <= L_MAX))
    return ln[keep], v[keep], t[keep]


def extract_instances(trace: Trace, thresholds: dict[int, AckThresholds], kappa: int = 15,
                      r: int = 10, alpha: float = 0.02) -> InstanceTable:
    """Instances of every (ID, IDS flag) stream that has learned thresholds."""
    parts = []
    for mid in trace.ids():
        thr = thresholds.get(mid)
        if thr is None:
            continue
        for attack in (False, True):
            ln, v, t = stream_values(trace, mid, attack, thr)
            if v.size == 0:
                continue
            tracker = DispersionTracker(trace.adc.lsb, kappa, r, alpha, mid, attack)
            parts.append(tracker.push(ln, v, t))
    return InstanceTable.concat(parts)


INSTANCE_HEADER = ["step_time_s", "id", *FEATURES, "source_label"]


def write_instances(path: str | Path, table: InstanceTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INSTANCE_HEADER)
        for t, f, m, a in zip(table.time.tolist(), table.features.tolist(),
                              table.message_id.tolist(), table.attack.tolist()):
            w.writerow([repr(t), f"0x{m:03X}", *map(repr, f), ATTACK if a else NORMAL])


def read_instances(path: str | Path) -> InstanceTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        return InstanceTable.empty()
    return InstanceTable(np.array([float(r[0]) for r in rows]),
                         np.array([[float(x) for x in r[2:8]] for r in rows]),
                         np.array([int(r[1], 16) for r in rows], dtype=np.int32),
                         np.array([r[8] == ATTACK for r in rows]))
