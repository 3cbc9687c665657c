import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canvolt.instance import InstanceTable
from canvolt.pipeline import PipelineParams, make_profile
from canvolt.profile import (CvdState, NotEnoughInstances, OrderingError, VoltageProfile, adjust_profiles,
                             build_intrusion_profile, build_profile, cvd_update, load_fleet, match_profile,
                             save_fleet, supply_estimate)

NOMINAL = np.array([3.5, 1.5, 3.5, 1.5, 3.5, 1.5])


def table(times, feats, attack=False):
    times = np.asarray(times, float)
    return InstanceTable(times, np.asarray(feats, float), np.zeros(times.size, np.int32),
                         np.full(times.size, attack))


def test_cvd_nominal_levels_leave_state_unchanged():
    s = CvdState(last_step_time=0.0)
    s2 = cvd_update(s, NOMINAL, 1.0)
    assert np.all(s2.cvd == 0) and s2.last_step_time == 1.0
    assert s.last_step_time == 0.0


def test_cvd_increment_example():
    # one second at a 1e-3 scale is the 0.001 ks step of the worked example
    s = CvdState(last_step_time=0.0, time_scale=1e-3)
    f = NOMINAL.copy()
    f[0] = 3.57
    assert cvd_update(s, f, 1.0).cvd[0] == pytest.approx(-2e-5)


def test_cvd_ordering_error():
    s = CvdState(last_step_time=5.0)
    with pytest.raises(OrderingError):
        cvd_update(s, NOMINAL, 5.0)
    p = build_profile(table([0, 1, 2], [NOMINAL] * 3))
    with pytest.raises(OrderingError):
        p.update(NOMINAL, 1.5)


def test_psi_zero_and_linear_growth():
    p = build_profile(table(np.arange(10.0), [NOMINAL] * 10))
    assert p.psi == 0 and p.psi_accum == 0
    f = NOMINAL * 0.99
    n = 20
    p = build_profile(table(np.arange(n + 1.0), [f] * (n + 1)))
    c = 1.0 - f / NOMINAL
    assert p.psi == pytest.approx(c.sum())
    assert p.psi_accum == pytest.approx(n * c.sum())
    assert p.linearity_r2() == pytest.approx(1.0)


def test_exact_line_gives_exact_slope():
    p = VoltageProfile()
    for t in np.linspace(0.01, 1.0, 50):
        p.rls_update(t, 5.0 * t)
    assert p.upsilon == pytest.approx(5.0, abs=1e-12)
    with pytest.raises(OrderingError):
        p.rls_update(0.5, 2.5)


@given(st.floats(-200, 200), st.integers(0, 2**31), st.integers(3, 200))
@settings(max_examples=50, deadline=None)
def test_rls_equals_ols(slope, seed, n):
    r = np.random.default_rng(seed)
    t = np.cumsum(r.uniform(0.001, 0.01, n))
    y = slope * t + r.normal(0, 1, n)
    p = VoltageProfile()
    for a, b in zip(t, y):
        p.rls_update(a, b)
    ols = np.sum(t * y) / np.sum(t * t)
    assert p.upsilon == pytest.approx(ols, rel=1e-6, abs=1e-6)
    assert p.upsilon_ols == pytest.approx(ols, rel=1e-9, abs=1e-9)


def test_upsilon_scales_with_deviation():
    # a constant deviation d per second gives a slope of 1000*d per kilosecond
    f = NOMINAL * 0.999
    p = build_profile(table(np.arange(100.0), [f] * 100))
    assert p.upsilon == pytest.approx(1000 * np.sum(1 - f / NOMINAL))


def test_intrusion_profile_needs_two_flagged():
    with pytest.raises(NotEnoughInstances):
        build_intrusion_profile(table([1.0], [NOMINAL], attack=True))
    with pytest.raises(NotEnoughInstances):
        build_intrusion_profile(table([1.0, 2.0], [NOMINAL] * 2, attack=False))


def test_intrusion_copy_of_legit_stream_matches(sedan_fleet):
    tab = sedan_fleet.tables["D"]
    legit = make_profile(tab, "D", PipelineParams())
    flagged = InstanceTable(tab.time, tab.features, tab.message_id, np.ones(len(tab), bool))
    assert build_intrusion_profile(flagged).upsilon == legit.upsilon


def test_match_examples():
    fleet = {"A": 102.6, "B": 85.0, "C": 137.0}
    assert match_profile(102.6, fleet).candidates == ("A",)
    assert match_profile(90.0, {"A": 92.0, "B": 88.0}).kind == "ambiguous"
    assert match_profile(0.5, {"A": 100.0}).kind == "unknown"
    assert match_profile(1.5, {"A": 0.0}).kind == "unique"  # the absolute floor
    with pytest.raises(ValueError):
        match_profile(1.0, {})


@given(st.floats(-500, 500), st.floats(-500, 500))
def test_match_rule(target, u):
    res = match_profile(target, {"X": u})
    assert (res.kind == "unique") == (abs(u - target) <= max(2.0, 0.1 * abs(u)))


def test_supply_estimate_nominal():
    assert supply_estimate(NOMINAL)[0] == pytest.approx(5.0)


def test_adjust_noop_and_shift():
    p = make_profile(table(np.arange(5.0), [NOMINAL] * 5), "A", PipelineParams())
    adj = adjust_profiles({"A": p}, {"A": p.reference})
    assert adj.delta == {"A": 0.0}
    assert (p.cvd.nu_star_h, p.cvd.nu_star_l) == (3.5, 1.5)
    shifted = NOMINAL + np.array([0.75, 0.25] * 3) * 0.05
    adjust_profiles({"A": p}, {"A": np.tile(shifted, (5, 1))})
    assert p.cvd.nu_star_h == pytest.approx(3.5 + 0.0375)
    assert p.cvd.nu_star_l == pytest.approx(1.5 + 0.0125)


def test_adjust_skips_missing_ecu():
    fleet = {k: make_profile(table(np.arange(5.0), [NOMINAL] * 5), k, PipelineParams()) for k in "AB"}
    with pytest.warns(UserWarning):
        adj = adjust_profiles(fleet, {"A": np.tile(NOMINAL + 0.01, (3, 1))})
    assert adj.skipped == ("B",)
    assert adj.applied["B"] == adj.applied["A"]


def test_save_load_and_continue(tmp_path, sedan_fleet):
    tab = sedan_fleet.tables["A"]
    half = len(tab) // 2
    full = make_profile(tab, "A", PipelineParams())
    part = make_profile(tab.select(np.arange(half)), "A", PipelineParams())
    save_fleet(tmp_path / "f.json", {"A": part})
    back = load_fleet(tmp_path / "f.json")["A"]
    assert back.upsilon == part.upsilon
    back.consume(tab.select(np.arange(half, len(tab))))
    assert back.upsilon == pytest.approx(full.upsilon, rel=1e-12)


def test_resume_reanchors_clock():
    p = build_profile(table(np.arange(50.0), [NOMINAL * 0.999] * 50))
    u = p.upsilon
    p.resume()
    p.update(NOMINAL * 0.999, 1000.0)  # anchors only
    assert p.upsilon == u
    p.consume(table(1000.0 + np.arange(1, 50.0), [NOMINAL * 0.999] * 49))
    assert p.upsilon == pytest.approx(u, rel=1e-9)


def test_stationary_run_is_linear(sedan_fleet):
    for p in sedan_fleet.profiles.values():
        assert p.linearity_r2() >= 0.99


def test_ids_of_one_ecu_share_a_profile(sedan_fleet):
    inst = sedan_fleet.instances
    fleet = sedan_fleet.profiles
    for mid, owner in sedan_fleet.owner_map.items():
        t = inst.select((inst.message_id == mid) & ~inst.attack).sorted()
        u = make_profile(t, owner, PipelineParams()).upsilon
        assert match_profile(u, fleet).candidates == (owner,)
