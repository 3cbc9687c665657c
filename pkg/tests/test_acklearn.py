import numpy as np
import pytest
from hypothesis import given, strategies as st

from canvolt import acklearn
from canvolt.acklearn import (AckThresholds, NeedMoreData, NoAckObserved, ack_threshold_high, ack_threshold_low,
                              collect_round, filter_dominant, is_ack, learn, learn_all, learn_from_values,
                              refine_max_set, refine_min_set)
from canvolt.bus import BusConfig, EcuConfig, EcuElectricalParams, MessageSpec, TransientModel, run_scenario
from canvolt.stats import histogram_mode, mad
from canvolt.trace import LINE_H, LINE_L, Slot

LSB = 5.0 / 1023


def test_filter_dominant_examples():
    assert filter_dominant([3.4, 2.6, 2.5, 3.3, 3.8], LINE_H).tolist() == [3.4, 3.3, 3.8]
    assert filter_dominant([1.5, 2.4, 2.25], LINE_L).tolist() == [1.5, 2.25]
    assert filter_dominant([2.5, 2.5], LINE_H).size == 0
    assert filter_dominant([2.75], LINE_H).tolist() == [2.75]


def test_histogram_mode_and_mad():
    v = np.array([3, 3, 3, 4, 5]) * LSB
    assert histogram_mode(v, LSB) == pytest.approx(3 * LSB)
    assert mad([1.0, 2.0, 3.0, 4.0, 100.0]) == 1.0
    with pytest.raises(ValueError):
        histogram_mode([], LSB)


def test_collect_round_examples():
    h = np.full(30, np.rint(3.5 / LSB) * LSB)
    l = np.full(30, np.rint(1.5 / LSB) * LSB)
    r = collect_round(h, l, 30, LSB)
    assert r.max_h == pytest.approx(r.most_frequent_h)
    h[7] = 4.0
    r = collect_round(h, l, 30, LSB)
    assert r.max_h == 4.0
    assert r.most_frequent_h == pytest.approx(3.5, abs=LSB / 2)
    with pytest.raises(NeedMoreData):
        collect_round(h[:29], l, 30, LSB)


def test_refine_examples():
    s_freq = np.array([3.50, 3.51, 3.49])
    s_max = np.array([4.0, 4.1, 4.05])
    assert refine_max_set(s_max, s_freq).tolist() == s_max.tolist()
    const = np.full(5, 3.5)
    assert refine_max_set([3.5, 3.49, 3.9], const, 3.0, resolution=0.0).tolist() == [3.5, 3.9]
    assert refine_min_set([1.5, 1.51, 1.0], np.full(5, 1.5), 3.0, resolution=0.0).tolist() == [1.5, 1.0]


def test_refine_bimodal_keeps_upper_lobe(rng):
    s_freq = 3.5 + rng.normal(0, 0.005, 50)
    s_max = np.where(rng.random(50) < 0.4, 4.0, 3.53) + rng.normal(0, 0.005, 50)
    kept = refine_max_set(s_max, s_freq, 3.0, LSB)
    dropped = np.setdiff1d(s_max, kept)
    assert kept.size and dropped.size
    assert kept.min() > dropped.max()


def test_threshold_examples():
    assert ack_threshold_high([4.0] * 4, LSB) == 4.0
    assert ack_threshold_low([1.0] * 4, LSB) == 1.0
    r = np.array([4.0, 4.0, 4.0, 4.2])
    med, m = np.median(r), np.median(np.abs(r - np.median(r)))
    oracle = max(med - 3 * m, r.mean() - 3 * r.std())
    assert oracle == pytest.approx(4.0)  # MAD is zero, so the median candidate wins
    assert ack_threshold_high(r, LSB) == pytest.approx(oracle)
    assert ack_threshold_high([4.1], LSB) == pytest.approx(4.1 - LSB)
    assert ack_threshold_low([0.9], LSB) == pytest.approx(0.9 + LSB)
    with pytest.raises(NoAckObserved):
        ack_threshold_high([], LSB)


@given(st.lists(st.floats(3.8, 4.3), min_size=2, max_size=40))
def test_threshold_at_or_below_median(vals):
    assert ack_threshold_high(vals, LSB, LSB) <= np.median(vals) + 1e-12
    assert ack_threshold_low([5 - v for v in vals], LSB, LSB) >= np.median([5 - v for v in vals]) - 1e-12


def test_no_ack_sets_line_bounds_and_warning():
    p = EcuElectricalParams(5.0, 0.0, 0.5, 30.0, 30.0, TransientModel(noise_sigma=0.0))
    cfg = BusConfig((EcuConfig("A", p, (MessageSpec(0x10, 0.002, 0.002),)),))
    res = run_scenario(cfg, 0, 6.0)
    t = learn(res.trace, 0x10)
    assert t.warning
    assert (t.gamma_h, t.gamma_l) == (4.5, 0.5)


def test_learn_needs_data():
    with pytest.raises(NeedMoreData):
        learn_from_values(np.full(100, 3.5), np.full(100, 1.5), 1, LSB)


def test_thresholds_separate_ack_on_prototype(prototype):
    cfg, res = prototype
    thr = learn_all(res.trace)
    assert set(thr) == {m.frame_id for e in cfg.ecus for m in e.messages}
    tr, slot = res.trace, res.truth.slot
    assert not any(t.warning for t in thr.values())
    for line in (LINE_H, LINE_L):
        hits = {Slot.ACK: [], Slot.NON_ACK_DOMINANT: []}
        for mid, t in thr.items():
            s = (tr.frame_id == mid) & (tr.line == line)
            flagged = is_ack(tr.volts[s], line, t)
            for k in hits:
                hits[k].append(flagged[slot[s] == k])
        assert np.concatenate(hits[Slot.ACK]).mean() >= 0.99
        assert np.concatenate(hits[Slot.NON_ACK_DOMINANT]).mean() <= 0.001


def test_thresholds_differ_per_id(sedan):
    cfg, res = sedan
    thr = learn_all(res.trace)
    assert len({round(t.gamma_h, 6) for t in thr.values()}) > 1


def test_threshold_json_roundtrip(tmp_path):
    thr = {0x1EA: AckThresholds(0x1EA, 3.8, 1.2), 0x0A0: AckThresholds(0x0A0, 3.9, 1.1, True)}
    acklearn.save_thresholds(tmp_path / "t.json", thr)
    assert acklearn.load_thresholds(tmp_path / "t.json") == thr
    assert '"id": "0x1EA"' in (tmp_path / "t.json").read_text()
