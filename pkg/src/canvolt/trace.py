"""Columnar sample traces and their CSV representation.

A :class:`Trace` holds only what a receiver attached to the bus can observe:
timestamps, line, ADC code, the ID of the frame being received and the IDS
verdict for that frame.  Ground truth (slot class and driving ECU) lives in a
separate :class:`TraceTruth` that is written to its own sidecar file, so the
fingerprinting stages never see it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

LINE_H = 0
LINE_L = 1
_LINE_NAMES = ("H", "L")


class Slot(IntEnum):
    NON_ACK_DOMINANT = 0
    ACK = 1
    RECESSIVE = 2


@dataclass(frozen=True)
class Adc:
    bits: int = 10
    full_scale: float = 5.0

    @property
    def lsb(self) -> float:
        return self.full_scale / (2**self.bits - 1)

    @property
    def max_code(self) -> int:
        return 2**self.bits - 1

    def quantize(self, volts: np.ndarray) -> np.ndarray:
        codes = np.rint(np.asarray(volts, dtype=float) / self.lsb)
        return np.clip(codes, 0, self.max_code).astype(np.int32)

    def to_volts(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=float) * self.lsb


@dataclass(frozen=True)
class VoltageSample:
    time: float
    line: str
    adc_code: int
    volts: float
    frame_id: int
    truth_slot: Optional[Slot] = None
    truth_source_ecu: Optional[str] = None


@dataclass(frozen=True)
class MessageRecord:
    frame_id: int
    transmit_time: float
    ids_attack_flag: bool
    samples: tuple[VoltageSample, ...]
    source_ecu: Optional[str] = None


@dataclass
class Trace:
    """One row per (sample, line); rows are in time order with H before L."""

    time: np.ndarray
    line: np.ndarray
    adc_code: np.ndarray
    frame_id: np.ndarray
    frame_seq: np.ndarray
    ids_flag: np.ndarray
    adc: Adc = field(default_factory=Adc)

    def __len__(self) -> int:
        return len(self.time)

    @property
    def volts(self) -> np.ndarray:
        return self.adc.to_volts(self.adc_code)

    @classmethod
    def empty(cls, adc: Adc | None = None) -> "Trace":
        z = np.zeros(0)
        return cls(z, z.astype(np.int8), z.astype(np.int32), z.astype(np.int32),
                   z.astype(np.int64), z.astype(bool), adc or Adc())

    def select(self, mask: np.ndarray) -> "Trace":
        return Trace(self.time[mask], self.line[mask], self.adc_code[mask],
                     self.frame_id[mask], self.frame_seq[mask], self.ids_flag[mask], self.adc)

    def ids(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.frame_id))


@dataclass
class TraceTruth:
    slot: np.ndarray
    ecu_index: np.ndarray
    ecu_names: tuple[str, ...]

    def ecu(self, row: int) -> str:
        return self.ecu_names[int(self.ecu_index[row])]


def iter_messages(trace: Trace, truth: TraceTruth | None = None) -> Iterator[MessageRecord]:
    """Group a trace into per-frame records (mostly for inspection and tests)."""
    if len(trace) == 0:
        return
    volts = trace.volts
    bounds = np.flatnonzero(np.diff(trace.frame_seq)) + 1
    starts = np.concatenate([[0], bounds])
    ends = np.concatenate([bounds, [len(trace)]])
    for a, b in zip(starts, ends):
        samples = []
        for r in range(a, b):
            samples.append(VoltageSample(
                time=float(trace.time[r]),
                line=_LINE_NAMES[trace.line[r]],
                adc_code=int(trace.adc_code[r]),
                volts=float(volts[r]),
                frame_id=int(trace.frame_id[r]),
                truth_slot=Slot(int(truth.slot[r])) if truth is not None else None,
                truth_source_ecu=truth.ecu(r) if truth is not None else None,
            ))
        yield MessageRecord(
            frame_id=int(trace.frame_id[a]),
            transmit_time=float(trace.time[a]),
            ids_attack_flag=bool(trace.ids_flag[a]),
            samples=tuple(samples),
            source_ecu=truth.ecu(a) if truth is not None else None,
        )


def truth_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".truth.csv") if path.suffix != ".csv" else \
        path.with_name(path.stem + ".truth.csv")


TRACE_HEADER = ["time_s", "line", "adc_code", "frame_id", "frame_seq", "ids_flag"]
TRUTH_HEADER = ["row", "truth_slot", "truth_ecu"]


def write_trace(path: str | Path, trace: Trace, truth: TraceTruth | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t, ln, c, fid, seq, flag in zip(trace.time.tolist(), trace.line.tolist(),
                                             trace.adc_code.tolist(), trace.frame_id.tolist(),
                                             trace.frame_seq.tolist(), trace.ids_flag.tolist()):
            w.writerow([repr(t), _LINE_NAMES[ln], c, f"0x{fid:03X}", seq, int(flag)])
    if truth is not None:
        with open(truth_path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRUTH_HEADER)
            for r, (s, e) in enumerate(zip(truth.slot.tolist(), truth.ecu_index.tolist())):
                w.writerow([r, Slot(s).name, truth.ecu_names[e]])


def read_trace(path: str | Path, adc: Adc | None = None) -> Trace:
    """Read a trace CSV.  The truth sidecar is deliberately not touched."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[: len(TRACE_HEADER)] != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected trace header {header}")
    if not body:
        return Trace.empty(adc)
    cols = list(zip(*body))
    return Trace(
        time=np.array(cols[0], dtype=float),
        line=np.array([_LINE_NAMES.index(v) for v in cols[1]], dtype=np.int8),
        adc_code=np.array(cols[2], dtype=np.int32),
        frame_id=np.array([int(v, 16) for v in cols[3]], dtype=np.int32),
        frame_seq=np.array(cols[4], dtype=np.int64),
        ids_flag=np.array(cols[5], dtype=np.int8).astype(bool),
        adc=adc or Adc(),
    )


def read_truth(path: str | Path, ecu_names: Sequence[str] | None = None) -> TraceTruth:
    with open(truth_path(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    names = list(ecu_names or [])
    idx = []
    for r in rows:
        if r[2] not in names:
            names.append(r[2])
        idx.append(names.index(r[2]))
    return TraceTruth(
        slot=np.array([Slot[r[1]].value for r in rows], dtype=np.int8),
        ecu_index=np.array(idx, dtype=np.int32),
        ecu_names=tuple(names),
    )
