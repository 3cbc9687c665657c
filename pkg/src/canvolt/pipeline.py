"""End-to-end fingerprinting stages shared by the harness and the CLI.

Everything here sees only what a bus receiver sees (trace rows and IDS
flags) plus the ID-to-ECU ownership table of the fleet.
"""

from __future__ import annotations

import copy
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import acklearn, classifier, instance, profile
from .acklearn import AckThresholds
from .bus import BusConfig
from .instance import FEATURES, InstanceTable
from .profile import VoltageProfile


@dataclass(frozen=True)
class PipelineParams:
    m: int = 30
    n: int = 50
    b: float = 3.0
    kappa: int = 15
    r: int = 10
    alpha: float = 0.02
    rel_tol: float = 0.1
    abs_tol: float = 2.0
    trees: int = 200
    forgetting: float = 1.0
    time_scale: float = 1.0
    train_fraction: float = 0.5
    max_train_per_class: Optional[int] = 80
    reference_size: int = 100


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with attribution
        raise StageError(name, exc) from exc


def owners(config: BusConfig) -> dict[int, str]:
    """Legitimate sender of every message ID."""
    return {m.frame_id: e.name for e in config.ecus for m in e.messages if not m.forged}


def ecu_tables(table: InstanceTable, owner_map: Mapping[int, str]) -> dict[str, InstanceTable]:
    """Unflagged instances grouped by the ECU owning their ID, in time order."""
    legit = table.select(~table.attack)
    out = {}
    for name in sorted(set(owner_map.values())):
        ids = [i for i, o in owner_map.items() if o == name]
        out[name] = legit.select(np.isin(legit.message_id, ids)).sorted()
    return out


def make_profile(table: InstanceTable, name: str, params: PipelineParams,
                 nu_star=(profile.NU_STAR_H, profile.NU_STAR_L), keep_history: bool = False) -> VoltageProfile:
    p = VoltageProfile(name=name, cvd=profile.CvdState(nu_star_h=nu_star[0], nu_star_l=nu_star[1],
                                                        time_scale=params.time_scale),
                       forgetting=params.forgetting, keep_history=keep_history)
    p.consume(table)
    if len(table):
        p.reference = table.features[-params.reference_size:].copy()
    return p


@dataclass
class FleetState:
    """What the defender has learned about a fleet."""

    thresholds: dict[int, AckThresholds]
    tables: dict[str, InstanceTable]
    profiles: dict[str, VoltageProfile]
    owner_map: dict[int, str]
    instances: InstanceTable = field(repr=False, default_factory=InstanceTable.empty)

    def upsilons(self) -> dict[str, float]:
        return {k: p.upsilon for k, p in self.profiles.items()}

    def snapshot(self) -> "FleetState":
        return copy.deepcopy(self)


def learn_fleet(trace, config: BusConfig, params: PipelineParams = PipelineParams(),
                keep_history: bool = False) -> FleetState:
    """Phase 1 to Phase 3 on an attack-free trace."""
    with stage("ack-learn"):
        thr = acklearn.learn_all(trace, params.m, params.n, params.b)
    with stage("instance"):
        inst = instance.extract_instances(trace, thr, params.kappa, params.r, params.alpha)
    own = owners(config)
    tabs = ecu_tables(inst, own)
    with stage("profile"):
        profs = {n: make_profile(t, n, params, keep_history=keep_history) for n, t in tabs.items()}
    return FleetState(thr, tabs, profs, own, inst)


def extract(trace, fleet: FleetState, params: PipelineParams = PipelineParams()) -> InstanceTable:
    with stage("instance"):
        return instance.extract_instances(trace, fleet.thresholds, params.kappa, params.r, params.alpha)


def train_model(tables: Mapping[str, InstanceTable], params: PipelineParams = PipelineParams(),
                seed: int = 0) -> classifier.ForestModel:
    """Forest on a random ``train_fraction`` of each ECU's instances (most recent rows when capped)."""
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for name in sorted(tables):
        tab = tables[name]
        idx = np.flatnonzero(rng.random(len(tab)) < params.train_fraction)
        if params.max_train_per_class is not None:
            idx = idx[-params.max_train_per_class:]
        feats.append(tab.features[idx])
        labels.extend([name] * idx.size)
    X = np.concatenate(feats) if feats else np.zeros((0, 6))
    ds = classifier.InstanceDataset(X, np.array(labels), np.ones(len(labels), bool), FEATURES)
    with stage("classifier"):
        return classifier.train(ds, params.trees, seed)


@dataclass(frozen=True)
class Verdict:
    """Outcome of attacker identification."""

    ecu: Optional[str]
    kind: str  # unique, ambiguous, unknown or insufficient
    candidates: tuple[str, ...]
    decided_by: str  # phase3, phase4 or none
    intrusion_upsilon: Optional[float] = None
    confidence: Optional[float] = None
    low_confidence: bool = False

    def to_dict(self) -> dict:
        return {"ecu": self.ecu, "kind": self.kind, "candidates": list(self.candidates),
                "decided_by": self.decided_by, "intrusion_upsilon": self.intrusion_upsilon,
                "confidence": self.confidence, "low_confidence": self.low_confidence}


def identify(attack: InstanceTable, fleet_profiles: Mapping[str, VoltageProfile],
             model: classifier.ForestModel | None = None, params: PipelineParams = PipelineParams(),
             forced: bool = False, nu_star: Sequence[float] | None = None) -> Verdict:
    """Phase 3 match of the intrusion profile, with Phase 4 for ambiguous matches.

    ``forced`` runs Phase 4 over the whole fleet whatever Phase 3 says.
    ``nu_star`` defaults to the fleet's (possibly adjusted) nominal levels.
    """
    flagged = attack.select(attack.attack)
    if nu_star is None:
        first = next(iter(fleet_profiles.values()))
        nu_star = (first.cvd.nu_star_h, first.cvd.nu_star_l)
    try:
        with stage("profile"):
            intr = profile.build_intrusion_profile(flagged, time_scale=params.time_scale,
                                                   forgetting=params.forgetting, nu_star=tuple(nu_star))
        u = intr.upsilon
        match = profile.match_profile(u, fleet_profiles, params.rel_tol, params.abs_tol)
        kind, cands = match.kind, match.candidates
    except StageError as exc:
        if not isinstance(exc.cause, profile.NotEnoughInstances):
            raise
        u, kind, cands = None, "insufficient", ()

    def phase4(candidates):
        with stage("classifier"):
            res = classifier.resolve(model, flagged.features, candidates, FEATURES)
        return Verdict(res.ecu, kind, cands, "phase4", u, res.confidence, res.low_confidence)

    if model is not None and len(flagged) and (forced or kind in ("ambiguous", "insufficient")):
        return phase4(cands if (kind == "ambiguous" and not forced) else tuple(sorted(fleet_profiles)))
    if kind == "unique":
        return Verdict(cands[0], kind, cands, "phase3", u)
    return Verdict(None, kind, cands, "none", u)
