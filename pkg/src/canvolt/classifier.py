"""Random forest verification over voltage instances.

Used when profiles alone cannot single out one ECU: every attack instance is
classified on its six momentary features and the per-instance verdicts are
pooled by plurality vote.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _forest
from .instance import FEATURES


class SingleClassError(ValueError):
    pass


class NotEnoughInstances(ValueError):
    pass


@dataclass
class InstanceDataset:
    features: np.ndarray
    labels: np.ndarray
    train: Optional[np.ndarray] = None
    feature_names: tuple[str, ...] = FEATURES

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels).astype(str)
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite feature values")
        if self.train is None:
            self.train = np.ones(len(self.labels), dtype=bool)

    def split(self, fraction: float = 0.5, seed: int = 0) -> "InstanceDataset":
        """Mark a random ``fraction`` of each class as training rows."""
        rng = np.random.default_rng(seed)
        train = np.zeros(len(self.labels), dtype=bool)
        for lab in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == lab)
            k = int(round(fraction * idx.size))
            train[rng.choice(idx, size=k, replace=False)] = True
        return InstanceDataset(self.features, self.labels, train, self.feature_names)


@dataclass
class ForestModel:
    classes: tuple[str, ...]
    feature_names: tuple[str, ...]
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    seed: int = 0
    max_features: int = 2

    @property
    def n_trees(self) -> int:
        return self.offsets.size - 1

    def _columns(self, X, feature_names) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        names = tuple(feature_names) if feature_names is not None else self.feature_names
        if sorted(names) != sorted(self.feature_names):
            raise ValueError(f"feature names {names} do not match model {self.feature_names}")
        return np.ascontiguousarray(X[:, [names.index(n) for n in self.feature_names]])

    def votes(self, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
        """Per-row tree vote counts, columns ordered as ``classes``."""
        Xc = self._columns(X, feature_names)
        return _forest.forest_votes(Xc, self.feat, self.thr, self.left, self.right, self.value,
                                    self.offsets, len(self.classes))

    def predict(self, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
        v = self.votes(X, feature_names)
        return np.array(self.classes)[np.argmax(v, axis=1)]

    def to_dict(self) -> dict:
        trees = []
        for t in range(self.n_trees):
            a, b = self.offsets[t], self.offsets[t + 1]
            trees.append({"feature": self.feat[a:b].tolist(), "threshold": self.thr[a:b].tolist(),
                          "left": self.left[a:b].tolist(), "right": self.right[a:b].tolist(),
                          "value": self.value[a:b].tolist()})
        return {"format": "canvolt-forest-1", "classes": list(self.classes),
                "feature_names": list(self.feature_names), "seed": self.seed,
                "max_features": self.max_features, "trees": trees}

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        trees = d["trees"]
        sizes = [len(t["feature"]) for t in trees]
        cat = lambda key, dt: np.array([x for t in trees for x in t[key]], dtype=dt)  # noqa: E731
        return cls(tuple(d["classes"]), tuple(d["feature_names"]), cat("feature", np.int64),
                   cat("threshold", float), cat("left", np.int64), cat("right", np.int64),
                   cat("value", np.int64), np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
                   d.get("seed", 0), d.get("max_features", 2))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str | Path) -> "ForestModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train(dataset: InstanceDataset, trees: int = 200, seed: int = 0,
          max_features: Optional[int] = None, min_rows: int = 10) -> ForestModel:
    """Fit a forest of Gini trees grown to purity on bootstrap resamples.

    Columns are put into a canonical (name-sorted) order first, so the model
    does not depend on how the caller arranged them.
    """
    X = dataset.features[dataset.train]
    labels = dataset.labels[dataset.train]
    classes, y = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise SingleClassError("training data holds a single class")
    counts = np.bincount(y)
    if counts.min() < min_rows:
        raise ValueError(f"class {classes[counts.argmin()]} has only {counts.min()} rows")
    names = tuple(sorted(dataset.feature_names))
    Xc = np.ascontiguousarray(X[:, [dataset.feature_names.index(n) for n in names]])
    mf = max_features or max(1, int(np.sqrt(len(names))))
    seeds = np.random.SeedSequence(seed).generate_state(trees, dtype=np.uint32).astype(np.int64)
    feat, thr, left, right, value, sizes = _forest.build_forest(Xc, y.astype(np.int64), classes.size, mf, seeds)
    keep = lambda a: np.concatenate([a[t, :sizes[t]] for t in range(trees)])  # noqa: E731
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return ForestModel(tuple(classes.tolist()), names, keep(feat), keep(thr), keep(left), keep(right),
                       keep(value), offsets, seed, mf)


@dataclass(frozen=True)
class Resolution:
    ecu: str
    confidence: float
    low_confidence: bool
    counts: dict = field(default_factory=dict)


def resolve(model: ForestModel, attack_features, candidates: Sequence[str] | None = None,
            feature_names: Sequence[str] | None = None) -> Resolution:
    """Pick the candidate that most attack instances are classified as.

    Each instance votes for the candidate with the most tree votes.  Ties in
    the instance plurality go to the larger mean tree-vote share, then to the
    lexicographically smallest name; a tie marks the result low-confidence.
    """
    X = np.atleast_2d(np.asarray(attack_features, dtype=float))
    if X.shape[0] == 0 or X.size == 0:
        raise NotEnoughInstances("no attack instances to classify")
    cands = sorted(set(candidates)) if candidates else sorted(model.classes)
    unknown = [c for c in cands if c not in model.classes]
    if unknown:
        raise ValueError(f"candidates {unknown} are not model classes")
    cols = [model.classes.index(c) for c in cands]
    v = model.votes(X, feature_names)[:, cols].astype(float)
    per = np.argmax(v, axis=1)
    counts = np.bincount(per, minlength=len(cands))
    share = (v / model.n_trees).mean(axis=0)
    top = np.flatnonzero(counts == counts.max())
    tie = top.size > 1
    if tie:
        top = top[share[top] == share[top].max()]
    winner = int(top[0])
    return Resolution(cands[winner], float(counts[winner] / X.shape[0]), tie,
                      {c: int(n) for c, n in zip(cands, counts)})
