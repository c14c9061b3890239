import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsense.control import (
    EstimatorModel,
    LoadBlock,
    Registry,
    Telemetry,
    UflsFloorWarning,
    assign_switch_off,
    blocks_from_powers,
    build_blocks,
    build_condition_table,
    bundle_from_dict,
    direct_shed_commands,
    expected_off,
    ingest_measurement,
    make_bundle,
    rank_by_labels,
    switch_off_frequency,
)
from gridsense.sfr import InvalidInputError, delta_f, rocof_hz, threshold_power_loss

# reference row thresholds, Hz/s, top row first
REFERENCE_TABLE1 = (-0.3236, -0.2987, -0.2729, -0.2461, -0.2179, -0.1879, -0.1557, -0.1200, -0.0779, 0.0)


# -- registry ----------------------------------------------------------------------


def test_registry_insert_and_update():
    reg = Registry()
    ingest_measurement(reg, "a", Telemetry(0.0, 1000.0, True, 1))
    assert len(reg) == 1
    assert reg.block_powers_mw(0.0) == {1: pytest.approx(0.001)}
    ingest_measurement(reg, "a", Telemetry(60.0, 500.0))
    assert len(reg) == 1
    assert reg.records["a"].block_id == 1
    assert reg.block_powers_mw(60.0) == {1: pytest.approx(0.0005)}


def test_registry_first_report_needs_block():
    with pytest.raises(InvalidInputError):
        ingest_measurement(Registry(), "a", Telemetry(0.0, 10.0))


def test_registry_late_packet_ignored():
    reg = Registry()
    ingest_measurement(reg, "a", Telemetry(60.0, 100.0, True, 1))
    ingest_measurement(reg, "a", Telemetry(30.0, 900.0))
    assert reg.records["a"].power_w == 100.0


def test_registry_stale_excluded_brute_force():
    rng = np.random.default_rng(3)
    reg = Registry(stale_horizon_s=180.0)
    for i in range(200):
        ingest_measurement(reg, i, Telemetry(float(rng.uniform(0, 400)), float(rng.uniform(10, 1800)), True, i % 7))
    now = 400.0
    expected = {}
    for r in reg.records.values():
        expected.setdefault(r.block_id, 0.0)
        if now - r.last_report <= 180.0:
            expected[r.block_id] += r.power_w / 1e6
    got = reg.block_powers_mw(now)
    assert got.keys() == expected.keys()
    for k in expected:
        assert got[k] == pytest.approx(expected[k])
    assert len(reg.stale(now)) + len(reg.active(now)) == 200
    assert reg.stale(now)


def test_negative_power_rejected():
    with pytest.raises(InvalidInputError):
        ingest_measurement(Registry(), "a", Telemetry(0.0, -1.0, True, 1))


# -- blocks --------------------------------------------------------------------------


def test_accumulated_power_prefix_sum():
    blocks = blocks_from_powers({"x": 3.0, "y": 2.0, "z": 5.0}, rank_by_labels({"x": 1, "y": 2, "z": 3}))
    assert [b.accumulated_power_mw for b in blocks] == [3.0, 5.0, 10.0]
    assert [b.importance_rank for b in blocks] == [1, 2, 3]


def test_single_block():
    (b,) = blocks_from_powers({7: 4.5})
    assert b.accumulated_power_mw == 4.5


def test_missing_rank_label():
    with pytest.raises(InvalidInputError):
        blocks_from_powers({"a": 1.0, "b": 2.0}, rank_by_labels({"a": 1}))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 100.0), min_size=1, max_size=30))
def test_prefix_sum_property(powers):
    blocks = blocks_from_powers(dict(enumerate(powers)))
    acc = [b.accumulated_power_mw for b in blocks]
    assert all(b >= a for a, b in zip(acc, acc[1:]))
    assert acc[0] == powers[0]
    for i in range(1, len(blocks)):
        assert acc[i] - acc[i - 1] == pytest.approx(blocks[i].block_power_mw, abs=1e-9)


def test_build_blocks_from_registry():
    reg = Registry(weight=10.0)
    for i in range(6):
        ingest_measurement(reg, i, Telemetry(0.0, 100.0 * (i + 1), True, i % 3 + 1))
    blocks = build_blocks(reg)
    assert [b.block_id for b in blocks] == [1, 2, 3]
    assert blocks[-1].accumulated_power_mw == pytest.approx(2100.0 * 10 / 1e6)


def test_fleet_accumulated_power_near_group_119():
    rng = np.random.default_rng(0)
    w = rng.uniform(10, 1800, 100_000)
    # 1000 groups of 100, each outlet weighted x10 to stand for 1e6 outlets
    acc = np.cumsum(w.reshape(1000, 100).sum(axis=1)) * 10 / 1e6
    # mean 905 W per outlet -> about 0.905 MW per group; the reference draw gave 107.13 MW at 119
    assert acc[118] == pytest.approx(107.13, rel=0.02)
    assert acc[197] == pytest.approx(178.12, rel=0.02)


# -- switch-off frequencies -------------------------------------------------------------


def test_switch_off_zero_block_is_f_s():
    blocks = blocks_from_powers({1: 0.0})
    assert switch_off_frequency(blocks, 49.5, 50.0, 2850.0, 2.5) == [49.5]


def test_switch_off_equal_blocks_decrease():
    blocks = blocks_from_powers({1: 1.0, 2: 1.0})
    f1, f2 = switch_off_frequency(blocks, 49.5, 50.0, 2850.0, 2.5)
    assert f2 < f1 < 49.5
    assert f1 == pytest.approx(49.5 - 1.0 / (2.5 * 2850.0) * 50.0)
    assert f2 == pytest.approx(49.5 - 1.0 / (2.5 * 2849.0) * 50.0)


def test_switch_off_nonpositive_denominator():
    with pytest.raises(InvalidInputError):
        switch_off_frequency(blocks_from_powers({1: 5.0, 2: 1.0}), 49.5, 50.0, 5.0, 2.5)


def test_switch_off_ufls_warning():
    with pytest.warns(UflsFloorWarning):
        switch_off_frequency(blocks_from_powers({1: 100.0}), 49.5, 50.0, 2850.0, 2.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        switch_off_frequency(blocks_from_powers({1: 1.0}), 49.5, 50.0, 2850.0, 2.5)


# -- condition table -------------------------------------------------------------------


def test_table1_structure(setup):
    tab = setup.table
    assert len(tab.rows) == 10
    assert tab.rows[0].f_high == 50.0 and tab.rows[-1].f_low == 49.5
    for a, b in zip(tab.rows, tab.rows[1:]):
        assert a.f_low == b.f_high
    for r in tab.rows:
        assert r.f_high - r.f_low == pytest.approx(0.05)
    th = tab.thresholds()
    assert all(b > a for a, b in zip(th, th[1:]))
    assert th[-1] == 0.0
    assert tab.n_required == 15


def test_table1_top_row(setup):
    assert setup.table.rows[0].rocof_threshold == pytest.approx(-0.3236, abs=0.005)


def test_table1_all_rows_close_to_reference(setup):
    # only the top row is pinned by calibration; the rest are predictions
    for got, want in zip(setup.table.thresholds(), REFERENCE_TABLE1):
        assert got == pytest.approx(want, abs=0.002)


def test_table_threshold_is_rocof_at_lower_bound(derived, setup):
    dps = threshold_power_loss(derived, 49.5)
    t = np.arange(0, 3.72, 1e-4)
    f = 50 * (1 + delta_f(derived, dps, t))
    for row in setup.table.rows[:-1]:
        i = int(np.argmin(np.abs(f - row.f_low)))
        assert rocof_hz(derived, dps, t[i]) == pytest.approx(row.rocof_threshold, abs=1e-3)


def test_condition_lookup_examples(setup):
    tab = setup.table
    row = tab.lookup(49.92)
    assert (row.f_low, row.f_high) == (49.9, 49.95)
    assert tab.satisfied(49.92, -0.35)
    assert not tab.satisfied(49.92, -0.10)
    assert tab.lookup(50.0) is None
    assert tab.lookup(49.49) is None
    assert tab.lookup(49.5).rocof_threshold == 0.0


def test_table_rejects_bad_inputs(derived):
    with pytest.raises(InvalidInputError):
        build_condition_table(derived, 50.0)
    with pytest.raises(InvalidInputError):
        build_condition_table(derived, 49.5, bin_width=0.03)


def test_rocof_monotone_in_loss(derived):
    s = derived.params.s_base
    losses = (100, 200, 300, 351.9, 400, 500, 600)
    t = np.arange(0, 30, 1e-3)
    for f_probe in (49.9, 49.8, 49.7):
        g = []
        for mw in losses:
            f = 50 * (1 + delta_f(derived, mw / s, t))
            if f.min() > f_probe:
                g.append(None)
                continue
            i = int(np.argmax(f <= f_probe))
            g.append(rocof_hz(derived, mw / s, t[i]))
        reached = [x for x in g if x is not None]
        assert all(b < a for a, b in zip(reached, reached[1:]))


# -- bundles ---------------------------------------------------------------------------


def _bundles(setup, powers=(3.0, 2.0, 5.0)):
    sc = setup.scenario
    blocks = blocks_from_powers(dict(enumerate(powers, start=1)))
    blocks = assign_switch_off(blocks, sc.f_s, 50.0, sc.system.p_load_total, sc.system.d)
    return blocks, make_bundle(setup.derived, blocks, sc.f_s, setup.table, issued_at=10.0)


def test_bundle_per_block(setup):
    blocks, b = _bundles(setup)
    assert set(b) == {1, 2, 3}
    assert min(b.values(), key=lambda x: x.accumulated_power_mw).block_id == 1
    assert b[3].accumulated_power_mw == 10.0
    assert b[2].switch_off_freq_hz == blocks[1].switch_off_freq_hz
    assert b[1].delta_p_s_mw == pytest.approx(351.90, abs=0.01)
    assert b[1].refresh_period_s == 900.0


def test_bundle_self_consistent(setup):
    _, b = _bundles(setup)
    assert b[1].is_consistent()


def test_bundle_staleness(setup):
    _, b = _bundles(setup)
    assert b[1].is_stale(params_changed_at=11.0)
    assert not b[1].is_stale(params_changed_at=9.0)


def test_bundle_json_roundtrip(setup):
    _, b = _bundles(setup)
    back = bundle_from_dict(json.loads(b[2].dumps()))
    assert back == b[2]


def test_estimator_model_from_derived(derived):
    m = EstimatorModel.from_derived(derived)
    assert m.g2 == pytest.approx(derived.g1 * derived.alpha)
    assert m.sigma == pytest.approx(derived.sigma)
    p = m.perturbed((0.05, 0, 0, 0, -0.05))
    assert p.g1 == pytest.approx(m.g1 * 1.05)
    assert p.phi == pytest.approx(m.phi * 0.95)
    assert p.omega_n == m.omega_n


# -- direct commands ---------------------------------------------------------------------


def _blocks(n=5, power=1.0):
    return blocks_from_powers({i + 1: power for i in range(n)})


def test_commands_empty_when_all_correct():
    blocks = _blocks()
    outlets = {i: i // 2 + 1 for i in range(10)}
    # loss 354.4 with dps 351.4 -> need 3 MW -> blocks with acc < 3 (1, 2) off
    observed = {i: not expected_off(354.4, 351.4, blocks[b - 1].accumulated_power_mw) for i, b in outlets.items()}
    assert direct_shed_commands(354.4, 351.4, blocks, outlets, observed) == []


def test_commands_single_stuck_outlet():
    blocks = _blocks()
    outlets = {i: i // 2 + 1 for i in range(10)}
    observed = {i: not expected_off(354.4, 351.4, blocks[b - 1].accumulated_power_mw) for i, b in outlets.items()}
    observed[0] = True
    assert direct_shed_commands(354.4, 351.4, blocks, outlets, observed) == [(0, "off")]


def test_commands_skip_unobserved():
    blocks = _blocks()
    assert direct_shed_commands(400.0, 351.4, blocks, {0: 1}, {}) == []


def test_commands_restore_shed_with_non_responders():
    rng = np.random.default_rng(5)
    n, groups = 2000, 20
    w = rng.uniform(10, 1800, n)
    group = np.arange(n) // (n // groups) + 1
    powers = {g: float(w[group == g].sum()) / 1e6 for g in range(1, groups + 1)}
    blocks = blocks_from_powers(powers)
    acc = {b.block_id: b.accumulated_power_mw for b in blocks}
    need = 0.5 * blocks[-1].accumulated_power_mw
    loss, dps = 100.0 + need, 100.0
    want = np.array([expected_off(loss, dps, acc[g]) for g in group])
    # 1% of outlets never act
    broken = rng.random(n) < 0.01
    off = want & ~broken
    cmds = direct_shed_commands(loss, dps, blocks, dict(enumerate(group.tolist())), {i: not off[i] for i in range(n)})
    assert {oid for oid, _ in cmds} == set(np.flatnonzero(broken & want).tolist())
    for oid, c in cmds:
        off[oid] = c == "off"
    shed = float(w[off].sum()) / 1e6
    assert shed == pytest.approx(float(w[want].sum()) / 1e6)
    # block-granular rule: within one block of the requirement
    assert abs(shed - need) <= max(powers.values())
    assert math.isfinite(shed)


def test_load_block_fields():
    b = LoadBlock("x", 1, 2.0, 2.0)
    assert math.isnan(b.switch_off_freq_hz)
