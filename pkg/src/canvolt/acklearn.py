"""Per-ID ACK threshold learning.

The ACK bit is driven by every receiver at once, which pushes CANH higher and
CANL lower than any single transmitter does.  ACK samples are rare, so the
per-round maximum (CANH) or minimum (CANL) of a handful of dominant samples
is bimodal: rounds that caught an ACK bit form an upper lobe.  The threshold
is placed at the lower edge of that lobe.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .stats import histogram_mode, mad
from .trace import LINE_H, LINE_L, Trace

H_MIN, H_MAX = 2.75, 4.5
L_MIN, L_MAX = 0.5, 2.25
# thresholds often land exactly on an ADC code; compare with a tiny margin so
# that floating-point rounding cannot flip a sample sitting on the threshold
EPS = 1e-9


class NeedMoreData(Exception):
    """Not enough dominant samples yet; keep collecting."""


class NoAckObserved(Exception):
    """The refined extreme set is empty."""


@dataclass(frozen=True)
class RoundStats:
    most_frequent_h: float
    most_frequent_l: float
    max_h: float
    min_l: float


@dataclass(frozen=True)
class AckThresholds:
    message_id: int
    gamma_h: float
    gamma_l: float
    warning: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id"] = f"0x{d.pop('message_id'):03X}"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AckThresholds":
        mid = d.get("id", d.get("message_id"))
        mid = int(mid, 16) if isinstance(mid, str) else int(mid)
        return cls(mid, float(d["gamma_h"]), float(d["gamma_l"]), bool(d.get("warning", False)))


def filter_dominant(values, line: int) -> np.ndarray:
    """Keep CANH values >= 2.75 V or CANL values <= 2.25 V, in order."""
    v = np.asarray(values, dtype=float)
    return v[v >= H_MIN] if line == LINE_H else v[v <= L_MAX]


def dominant_streams(trace: Trace, message_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Dominant CANH and CANL values of unflagged frames carrying ``message_id``."""
    sel = (trace.frame_id == message_id) & ~trace.ids_flag
    v = trace.volts[sel]
    line = trace.line[sel]
    return filter_dominant(v[line == LINE_H], LINE_H), filter_dominant(v[line == LINE_L], LINE_L)


def collect_round(values_h, values_l, m: int, lsb: float) -> RoundStats:
    """Statistics of the first ``m`` dominant values on each line."""
    h = np.asarray(values_h, dtype=float)[:m]
    l = np.asarray(values_l, dtype=float)[:m]
    if len(h) < m or len(l) < m:
        raise NeedMoreData(f"round needs {m} values per line, have {len(h)}/{len(l)}")
    return RoundStats(histogram_mode(h, lsb), histogram_mode(l, lsb), float(h.max()), float(l.min()))


def _spread(s_freq: np.ndarray, resolution: float) -> float:
    if len(s_freq) < 2:
        raise ValueError("need at least two rounds")
    return max(float(s_freq.std()), resolution)


def refine_max_set(s_max, s_freq, b: float = 3.0, resolution: float = 0.0) -> np.ndarray:
    """Round maxima at or above ``max(s_freq) + b*std(s_freq)``.

    ``resolution`` floors the standard deviation: quantized modes often all
    land on one code, and a zero spread would let ordinary round maxima
    through.
    """
    s_max, s_freq = np.asarray(s_max, dtype=float), np.asarray(s_freq, dtype=float)
    cut = s_freq.max() + b * _spread(s_freq, resolution)
    return s_max[s_max >= cut]


def refine_min_set(s_min, s_freq, b: float = 3.0, resolution: float = 0.0) -> np.ndarray:
    s_min, s_freq = np.asarray(s_min, dtype=float), np.asarray(s_freq, dtype=float)
    cut = s_freq.min() - b * _spread(s_freq, resolution)
    return s_min[s_min <= cut]


def ack_threshold_high(refined, lsb: float, resolution: float = 0.0) -> float:
    """Lower edge of the ACK lobe: the larger of median-3*MAD and mean-3*std.

    Both spreads are floored at ``resolution`` (pass the ADC step); a lobe
    that sits on one or two codes otherwise yields a zero spread and a
    threshold at its own median.
    """
    r = np.asarray(refined, dtype=float)
    if r.size == 0:
        raise NoAckObserved("no round maximum above the cutoff")
    if r.size == 1:
        return float(r[0] - lsb)
    return float(max(np.median(r) - 3 * max(mad(r), resolution),
                     r.mean() - 3 * max(r.std(), resolution)))


def ack_threshold_low(refined, lsb: float, resolution: float = 0.0) -> float:
    r = np.asarray(refined, dtype=float)
    if r.size == 0:
        raise NoAckObserved("no round minimum below the cutoff")
    if r.size == 1:
        return float(r[0] + lsb)
    return float(min(np.median(r) + 3 * max(mad(r), resolution),
                     r.mean() + 3 * max(r.std(), resolution)))


def learn_from_values(values_h, values_l, message_id: int, lsb: float,
                      m: int = 30, n: int = 50, b: float = 3.0) -> AckThresholds:
    values_h, values_l = np.asarray(values_h, float), np.asarray(values_l, float)
    if len(values_h) < m * n or len(values_l) < m * n:
        raise NeedMoreData(f"0x{message_id:03X}: need {m * n} dominant values per line, "
                           f"have {len(values_h)}/{len(values_l)}")
    rounds = [collect_round(values_h[k * m:], values_l[k * m:], m, lsb) for k in range(n)]
    f_h = [r.most_frequent_h for r in rounds]
    f_l = [r.most_frequent_l for r in rounds]
    warning = False
    try:
        gamma_h = ack_threshold_high(refine_max_set([r.max_h for r in rounds], f_h, b, lsb), lsb, lsb)
    except NoAckObserved:
        gamma_h, warning = H_MAX, True
    try:
        gamma_l = ack_threshold_low(refine_min_set([r.min_l for r in rounds], f_l, b, lsb), lsb, lsb)
    except NoAckObserved:
        gamma_l, warning = L_MIN, True
    return AckThresholds(message_id, gamma_h, gamma_l, warning)


def learn(trace: Trace, message_id: int, m: int = 30, n: int = 50, b: float = 3.0) -> AckThresholds:
    """Learn thresholds from the first ``m*n`` dominant values per line of one ID."""
    h, l = dominant_streams(trace, message_id)
    return learn_from_values(h, l, message_id, trace.adc.lsb, m, n, b)


def learn_all(trace: Trace, m: int = 30, n: int = 50, b: float = 3.0) -> dict[int, AckThresholds]:
    out = {}
    for mid in np.unique(trace.frame_id[~trace.ids_flag]).tolist():
        try:
            out[int(mid)] = learn(trace, int(mid), m, n, b)
        except NeedMoreData:
            continue
    return out


def is_ack(values, line: int, thr: AckThresholds) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v >= thr.gamma_h - EPS if line == LINE_H else v <= thr.gamma_l + EPS


def save_thresholds(path: str | Path, thresholds) -> None:
    if isinstance(thresholds, dict):
        thresholds = [thresholds[k] for k in sorted(thresholds)]
    items = [thresholds] if isinstance(thresholds, AckThresholds) else list(thresholds)
    data = [t.to_dict() for t in items]
    with open(path, "w") as fh:
        json.dump(data[0] if isinstance(thresholds, AckThresholds) else data, fh, indent=2)


def load_thresholds(path: str | Path) -> dict[int, AckThresholds]:
    with open(path) as fh:
        data = json.load(fh)
    items = data if isinstance(data, list) else [data]
    return {t.message_id: t for t in map(AckThresholds.from_dict, items)}
