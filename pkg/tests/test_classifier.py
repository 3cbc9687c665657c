import numpy as np
import pytest

from canvolt.classifier import (ForestModel, InstanceDataset, NotEnoughInstances, SingleClassError, resolve,
                                train)
from canvolt.instance import FEATURES


def clusters(rng, k=3, n=100, sep=1.0, noise=0.05):
    X = np.concatenate([rng.normal(c * sep, noise, (n, 6)) for c in range(k)])
    y = np.repeat([f"E{c}" for c in range(k)], n)
    return X, y


def accuracy(model, ds):
    test = ~ds.train
    return np.mean(model.predict(ds.features[test]) == ds.labels[test])


def test_separable_classes(rng):
    X, y = clusters(rng)
    ds = InstanceDataset(X, y).split(0.5, 0)
    assert accuracy(train(ds, 50, 0), ds) >= 0.99


def test_identical_distributions_near_chance(rng):
    k = 4
    X = rng.normal(0, 1, (400 * k, 6))
    y = np.repeat([f"E{c}" for c in range(k)], 400)
    ds = InstanceDataset(X, y).split(0.5, 0)
    assert accuracy(train(ds, 50, 0), ds) == pytest.approx(1 / k, abs=0.05)


def test_training_is_deterministic(rng):
    X, y = clusters(rng, noise=0.6)
    ds = InstanceDataset(X, y)
    a, b = train(ds, 20, 3), train(ds, 20, 3)
    assert np.array_equal(a.thr, b.thr) and np.array_equal(a.feat, b.feat)
    assert not np.array_equal(a.thr, train(ds, 20, 4).thr)


def test_column_order_does_not_matter(rng):
    X, y = clusters(rng, noise=0.6)
    perm = [3, 0, 5, 1, 4, 2]
    a = train(InstanceDataset(X, y), 20, 1)
    b = train(InstanceDataset(X[:, perm], y, None, tuple(FEATURES[i] for i in perm)), 20, 1)
    assert np.array_equal(a.votes(X), b.votes(X))
    assert np.array_equal(a.votes(X[:, perm], [FEATURES[i] for i in perm]), a.votes(X))


def test_training_errors(rng):
    X, y = clusters(rng)
    with pytest.raises(SingleClassError):
        train(InstanceDataset(X, np.full(len(y), "A")))
    with pytest.raises(ValueError):
        train(InstanceDataset(np.r_[X[:100], X[100:105]], np.r_[y[:100], y[100:105]]))
    with pytest.raises(ValueError):
        InstanceDataset(np.full((2, 6), np.nan), ["A", "B"])


def test_resolve_plurality_and_ties(rng):
    X, y = clusters(rng, k=2)
    model = train(InstanceDataset(X, y), 50, 0)
    r = resolve(model, X[y == "E1"][:10])
    assert r.ecu == "E1" and r.confidence == 1.0 and not r.low_confidence
    r = resolve(model, np.r_[X[:1], X[-1:]])
    assert r.ecu == "E0" and r.low_confidence
    assert resolve(model, X[:1], ["E1"]).ecu == "E1"
    with pytest.raises(NotEnoughInstances):
        resolve(model, np.zeros((0, 6)))
    with pytest.raises(ValueError):
        resolve(model, X[:1], ["nope"])


def test_split_fraction_per_class(rng):
    X, y = clusters(rng, n=40)
    ds = InstanceDataset(X, y).split(0.25, 9)
    for lab in np.unique(y):
        assert ds.train[y == lab].sum() == 10


def test_fleet_holdout_accuracy(sedan_fleet):
    X = np.concatenate([t.features for t in sedan_fleet.tables.values()])
    y = np.concatenate([[n] * len(t) for n, t in sedan_fleet.tables.items()])
    ds = InstanceDataset(X, y).split(0.5, 0)
    assert accuracy(train(ds, 200, 0), ds) >= 0.95


def test_model_roundtrip(tmp_path, rng):
    X, y = clusters(rng, noise=0.6)
    m = train(InstanceDataset(X, y), 10, 0)
    m.save(tmp_path / "m.json")
    back = ForestModel.load(tmp_path / "m.json")
    assert np.array_equal(back.votes(X), m.votes(X))
    assert back.classes == m.classes
