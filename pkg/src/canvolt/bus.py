"""Electrical CAN bus simulator.

Frames are laid out on an integer bit clock and sampled by a free-running ADC.
Every sample is labelled with its slot class (transmitter-driven dominant bit,
ACK bit driven by the receivers, or recessive bit) and the ECU that sent the
frame; those labels go into a :class:`~canvolt.trace.TraceTruth` that the
fingerprinting stages never read.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .trace import LINE_H, LINE_L, Adc, Slot, Trace, TraceTruth

FRAME_BITS = 110
ACK_INDEX = 99
RECESSIVE_LEVEL = 2.5
ISO_H = (2.75, 4.5)
ISO_L = (0.5, 2.25)


class ParameterError(ValueError):
    """Raised for electrically impossible or out-of-range parameters."""


@dataclass(frozen=True)
class TransientModel:
    """Per-ECU disturbance model.

    ``deviation_amplitude`` is the relative increase applied to both output
    transistor resistances during a burst (0.10 means +10 %).  Raising both
    resistances together lowers CANH and raises CANL, so the two lines move in
    opposite directions.
    """

    deviation_amplitude: float = 0.10
    burst_rate: float = 0.0
    burst_duration: float = 0.05
    noise_sigma: float = 0.005


@dataclass(frozen=True)
class EcuElectricalParams:
    vcc: float = 5.0
    vg: float = 0.0
    vd: float = 0.5
    r_dson_p: float = 30.0
    r_dson_n: float = 30.0
    transient_model: TransientModel = field(default_factory=TransientModel)

    def validate(self, r_load: float = 60.0) -> None:
        if self.r_dson_p <= 0 or self.r_dson_n <= 0:
            raise ParameterError("output resistances must be positive")
        if self.vcc - self.vg - 2 * self.vd <= 0:
            raise ParameterError("drive voltage vcc - vg - 2*vd must be positive")
        h, l = dominant_voltage(self, r_load)
        if not (ISO_H[0] <= h <= ISO_H[1] and ISO_L[0] <= l <= ISO_L[1]):
            raise ParameterError(f"dominant levels ({h:.3f}, {l:.3f}) V outside ISO bounds")


def _eq1(vcc: float, vg: float, vd: float, rp: float, rn: float, r_load: float):
    den = rp + rn + r_load
    drive = vcc - vg - 2 * vd
    if den <= 0 or drive <= 0:
        raise ParameterError("non-physical driver parameters")
    i = drive / den
    return vcc - vd - i * rp, vg + vd + i * rn


def dominant_voltage(params: EcuElectricalParams, r_load: float = 60.0) -> tuple[float, float]:
    """CANH and CANL levels while ``params`` drives a dominant bit alone."""
    return _eq1(params.vcc, params.vg, params.vd, params.r_dson_p, params.r_dson_n, r_load)


def ack_voltage(responders: Sequence[EcuElectricalParams], r_load: float = 60.0) -> tuple[float, float]:
    """Levels during the ACK bit, when all ``responders`` drive in parallel.

    The drivers are combined as parallel resistors with averaged supply,
    ground and diode drop.
    """
    if len(responders) == 0:
        raise ParameterError("ACK needs at least one responder")
    rp = 1.0 / sum(1.0 / p.r_dson_p for p in responders)
    rn = 1.0 / sum(1.0 / p.r_dson_n for p in responders)
    vcc = float(np.mean([p.vcc for p in responders]))
    vg = float(np.mean([p.vg for p in responders]))
    vd = float(np.mean([p.vd for p in responders]))
    return _eq1(vcc, vg, vd, rp, rn, r_load)


def solve_params(v_h: float, v_l: float, vcc: float = 5.0, vg: float = 0.0, vd: float = 0.5,
                 r_load: float = 60.0, transient_model: TransientModel | None = None) -> EcuElectricalParams:
    """Output resistances that make an ECU drive exactly ``(v_h, v_l)``."""
    i = (v_h - v_l) / r_load
    if i <= 0:
        raise ParameterError("v_h must exceed v_l")
    rp = (vcc - vd - v_h) / i
    rn = (v_l - vg - vd) / i
    p = EcuElectricalParams(vcc, vg, vd, rp, rn, transient_model or TransientModel())
    p.validate(r_load)
    return p


# ---------------------------------------------------------------- frames

def crc15(bits: Sequence[int]) -> int:
    crc = 0
    for b in bits:
        nxt = b ^ ((crc >> 14) & 1)
        crc = (crc << 1) & 0x7FFF
        if nxt:
            crc ^= 0x4599
    return crc


def frame_template(frame_id: int) -> np.ndarray:
    """Slot classes of the 110 bit times of a data frame carrying ``frame_id``.

    Layout: SOF, 11-bit ID, RTR/IDE/r0, DLC=8, 64 data bits alternating from
    0, CRC-15, delimiter, ACK, delimiter, 7-bit EOF, 2 bits of intermission.
    """
    if not 0 <= frame_id < 2048:
        raise ParameterError(f"frame id 0x{frame_id:X} is not an 11-bit identifier")
    head = [0] + [(frame_id >> (10 - k)) & 1 for k in range(11)] + [0, 0, 0] + [1, 0, 0, 0]
    head += [k % 2 for k in range(64)]
    crc = crc15(head)
    bits = head + [(crc >> (14 - k)) & 1 for k in range(15)] + [1]
    slots = [Slot.NON_ACK_DOMINANT if b == 0 else Slot.RECESSIVE for b in bits]
    slots += [Slot.ACK] + [Slot.RECESSIVE] * 10
    assert len(slots) == FRAME_BITS and slots[ACK_INDEX] == Slot.ACK
    return np.array(slots, dtype=np.int8)


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class MessageSpec:
    """A periodic or jittered message stream.

    Intervals are drawn uniformly from ``[interval_min, interval_max]``; equal
    bounds give a strictly periodic stream.  ``forged`` marks frames that the
    IDS oracle flags as attacks.
    """

    frame_id: int
    interval_min: float
    interval_max: float
    start: float = 0.0
    stop: Optional[float] = None
    forged: bool = False


@dataclass(frozen=True)
class SupplyRamp:
    """Linear change of an ECU's supply by ``delta_vcc`` over ``[start, start+duration]``."""

    start: float
    duration: float
    delta_vcc: float

    def offset(self, t: np.ndarray) -> np.ndarray:
        if self.duration <= 0:
            return np.where(t >= self.start, self.delta_vcc, 0.0)
        return self.delta_vcc * np.clip((t - self.start) / self.duration, 0.0, 1.0)


@dataclass(frozen=True)
class EcuConfig:
    name: str
    params: EcuElectricalParams
    messages: tuple[MessageSpec, ...] = ()
    ramps: tuple[SupplyRamp, ...] = ()


@dataclass(frozen=True)
class BusConfig:
    ecus: tuple[EcuConfig, ...]
    r_load: float = 60.0
    bitrate: int = 500_000
    sample_rate: int = 50_000
    adc_bits: int = 10
    adc_range: float = 5.0

    @property
    def adc(self) -> Adc:
        return Adc(self.adc_bits, self.adc_range)

    def ecu_names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.ecus)

    def ecu(self, name: str) -> EcuConfig:
        for e in self.ecus:
            if e.name == name:
                return e
        raise KeyError(name)

    def owner_of(self, frame_id: int) -> Optional[str]:
        for e in self.ecus:
            if any(m.frame_id == frame_id and not m.forged for m in e.messages):
                return e.name
        return None

    def replace_ecu(self, ecu: EcuConfig) -> "BusConfig":
        return dataclasses.replace(
            self, ecus=tuple(ecu if e.name == ecu.name else e for e in self.ecus))

    def validate(self) -> None:
        if self.sample_rate > self.bitrate:
            raise ParameterError("sample_rate must not exceed bitrate")
        names = self.ecu_names()
        if len(set(names)) != len(names):
            raise ParameterError("duplicate ECU names")
        owners: dict[int, str] = {}
        for e in self.ecus:
            e.params.validate(self.r_load)
            for m in e.messages:
                if m.interval_min <= 0 or m.interval_max < m.interval_min:
                    raise ParameterError(f"bad interval law for 0x{m.frame_id:X}")
                if m.forged:
                    continue
                if owners.setdefault(m.frame_id, e.name) != e.name:
                    raise ParameterError(f"0x{m.frame_id:X} has two legitimate transmitters")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BusConfig":
        ecus = []
        for e in d["ecus"]:
            p = dict(e["params"])
            p["transient_model"] = TransientModel(**p.get("transient_model", {}))
            msgs = []
            for m in e.get("messages", []):
                m = dict(m)
                if isinstance(m["frame_id"], str):
                    m["frame_id"] = int(m["frame_id"], 16)
                msgs.append(MessageSpec(**m))
            ecus.append(EcuConfig(e["name"], EcuElectricalParams(**p), tuple(msgs),
                                  tuple(SupplyRamp(**r) for r in e.get("ramps", []))))
        rest = {k: v for k, v in d.items() if k != "ecus"}
        return cls(ecus=tuple(ecus), **rest)


def load_config(path: str | Path) -> BusConfig:
    with open(path) as fh:
        return BusConfig.from_dict(json.load(fh))


def save_config(path: str | Path, config: BusConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------- simulation

@dataclass(frozen=True)
class FrameLog:
    """Columnar list of transmitted frames (ground truth)."""

    start_time: np.ndarray
    frame_id: np.ndarray
    ecu_index: np.ndarray
    forged: np.ndarray

    def __len__(self) -> int:
        return len(self.start_time)


@dataclass
class SimResult:
    trace: Trace
    truth: TraceTruth
    frames: FrameLog
    bursts: dict[str, np.ndarray]


def _arrivals(config: BusConfig, duration: float, rng: np.random.Generator):
    out = []  # (time, frame_id, ecu_index, forged)
    for ei, e in enumerate(config.ecus):
        for m in e.messages:
            stop = duration if m.stop is None else min(m.stop, duration)
            t = m.start
            while t < stop:
                out.append((t, m.frame_id, ei, m.forged))
                t += rng.uniform(m.interval_min, m.interval_max) if m.interval_max > m.interval_min \
                    else m.interval_min
    return out


def _serialize(arrivals, bitrate: int, horizon_bits: int):
    """Place frames on the bit clock, lowest pending ID first once the bus is free."""
    arrivals = sorted(((math.ceil(t * bitrate), fid, ei, fg) for t, fid, ei, fg in arrivals))
    starts, placed = [], []
    heap: list = []
    k, free = 0, 0
    n = len(arrivals)
    while k < n or heap:
        if not heap:
            free = max(free, arrivals[k][0])
        while k < n and arrivals[k][0] <= free:
            b, fid, ei, fg = arrivals[k]
            heapq.heappush(heap, (fid, b, k, ei, fg))
            k += 1
        fid, b, _, ei, fg = heapq.heappop(heap)
        if free >= horizon_bits:
            break
        starts.append(free)
        placed.append((fid, ei, fg))
        free += FRAME_BITS
    return starts, placed


def _bursts(tm: TransientModel, duration: float, rng: np.random.Generator) -> np.ndarray:
    if tm.burst_rate <= 0 or duration <= 0:
        return np.zeros((0, 2))
    k = rng.poisson(tm.burst_rate * duration)
    s = np.sort(rng.uniform(0.0, duration, size=k))
    iv = []
    for a in s:
        b = a + tm.burst_duration
        if iv and a <= iv[-1][1]:
            iv[-1][1] = max(iv[-1][1], b)
        else:
            iv.append([a, b])
    return np.array(iv, dtype=float).reshape(-1, 2)


def _in_intervals(t: np.ndarray, iv: np.ndarray) -> np.ndarray:
    if len(iv) == 0:
        return np.zeros(t.shape, dtype=bool)
    j = np.searchsorted(iv[:, 0], t, side="right") - 1
    ok = j >= 0
    out = np.zeros(t.shape, dtype=bool)
    out[ok] = t[ok] < iv[j[ok], 1]
    return out


def _levels(p: EcuElectricalParams, t: np.ndarray, ramps, bursts: np.ndarray, r_load: float):
    vcc = np.full(t.shape, p.vcc)
    for r in ramps:
        vcc = vcc + r.offset(t)
    scale = np.where(_in_intervals(t, bursts), 1.0 + p.transient_model.deviation_amplitude, 1.0)
    return vcc, p.r_dson_p * scale, p.r_dson_n * scale


def run_scenario(config: BusConfig, seed: int, duration: float) -> SimResult:
    """Simulate ``duration`` seconds of bus traffic.

    Only samples that fall inside a frame are recorded.  The random stream is
    consumed in a fixed order (schedule, bursts, noise), so a given
    ``(config, seed, duration)`` always produces the same trace.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    names = config.ecu_names()
    br, sr = int(config.bitrate), int(config.sample_rate)

    starts, placed = _serialize(_arrivals(config, duration, rng), br, math.ceil(duration * br))
    bursts = {e.name: _bursts(e.params.transient_model, duration, rng) for e in config.ecus}

    nf = len(starts)
    frames = FrameLog(
        start_time=np.array(starts, dtype=np.int64) / br,
        frame_id=np.array([p[0] for p in placed], dtype=np.int32),
        ecu_index=np.array([p[1] for p in placed], dtype=np.int32),
        forged=np.array([p[2] for p in placed], dtype=bool),
    )
    if nf == 0:
        truth = TraceTruth(np.zeros(0, np.int8), np.zeros(0, np.int32), names)
        return SimResult(Trace.empty(config.adc), truth, frames, bursts)

    s_bits = np.array(starts, dtype=np.int64)
    n0 = -((-s_bits * sr) // br)
    n1 = -((-(s_bits + FRAME_BITS) * sr) // br)
    counts = n1 - n0
    fidx = np.repeat(np.arange(nf), counts)
    n = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + np.repeat(n0, counts)
    t = n / sr
    bit = (n * br) // sr - s_bits[fidx]

    templates = {fid: frame_template(int(fid)) for fid in np.unique(frames.frame_id)}
    slot = np.empty(len(n), dtype=np.int8)
    for fid, tpl in templates.items():
        m = frames.frame_id[fidx] == fid
        slot[m] = tpl[bit[m]]
    tx = frames.ecu_index[fidx]
    if len(config.ecus) == 1:
        slot[slot == Slot.ACK] = Slot.RECESSIVE

    vh = np.full(len(n), RECESSIVE_LEVEL)
    vl = np.full(len(n), RECESSIVE_LEVEL)
    sigma = np.empty(len(n))
    for ei, e in enumerate(config.ecus):
        sigma[tx == ei] = e.params.transient_model.noise_sigma
        m = (tx == ei) & (slot == Slot.NON_ACK_DOMINANT)
        if not m.any():
            continue
        p = e.params
        vcc, rp, rn = _levels(p, t[m], e.ramps, bursts[e.name], config.r_load)
        i = (vcc - p.vg - 2 * p.vd) / (rp + rn + config.r_load)
        vh[m] = vcc - p.vd - i * rp
        vl[m] = p.vg + p.vd + i * rn

    for k in np.flatnonzero(slot == Slot.ACK):
        resp = []
        for ei, e in enumerate(config.ecus):
            if ei == tx[k]:
                continue
            vcc, rp, rn = _levels(e.params, t[k:k + 1], e.ramps, bursts[e.name], config.r_load)
            resp.append(dataclasses.replace(e.params, vcc=float(vcc[0]), r_dson_p=float(rp[0]),
                                            r_dson_n=float(rn[0])))
        vh[k], vl[k] = ack_voltage(resp, config.r_load)
        sigma[k] = float(np.mean([r.transient_model.noise_sigma for r in resp]))

    noise = rng.standard_normal((len(n), 2)) * sigma[:, None]
    adc = config.adc
    codes = adc.quantize(np.stack([vh + noise[:, 0], vl + noise[:, 1]], axis=1))

    rows = 2 * len(n)
    trace = Trace(
        time=np.repeat(t, 2),
        line=np.tile(np.array([LINE_H, LINE_L], dtype=np.int8), len(n)),
        adc_code=codes.reshape(rows),
        frame_id=np.repeat(frames.frame_id[fidx], 2),
        frame_seq=np.repeat(fidx.astype(np.int64), 2),
        ids_flag=np.repeat(frames.forged[fidx], 2),
        adc=adc,
    )
    truth = TraceTruth(slot=np.repeat(slot, 2), ecu_index=np.repeat(tx, 2).astype(np.int32),
                       ecu_names=names)
    return SimResult(trace, truth, frames, bursts)
