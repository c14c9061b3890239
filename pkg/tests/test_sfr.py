import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gridsense.sfr import (
    SAMPLE_PERIOD,
    GeneratorUnit,
    InvalidInputError,
    NoiseModel,
    PowerEvent,
    SystemParams,
    Trajectory,
    TrajectoryParseError,
    UnsupportedRegimeError,
    aggregate_droop,
    aggregate_inertia,
    delta_f,
    delta_f_multi,
    derive,
    f_nadir,
    ode_oracle,
    read_trajectory_csv,
    rocof,
    rocof_hz,
    rocof_multi,
    sample_trajectory,
    t_nadir,
    t_nadir_arctan,
    threshold_power_loss,
    threshold_power_loss_mw,
    write_trajectory_csv,
)

params_st = st.builds(
    SystemParams,
    h=st.floats(2.0, 15.0),
    d=st.floats(0.0, 3.0),
    r=st.floats(0.03, 0.1),
    km=st.floats(0.8, 1.0),
    fh=st.floats(0.15, 0.45),
    tr=st.floats(4.0, 12.0),
    s_base=st.floats(50.0, 5000.0),
)


def _underdamped(p):
    try:
        return derive(p)
    except UnsupportedRegimeError:
        assume(False)


# -- aggregation ---------------------------------------------------------------


def test_aggregate_inertia_weighted_mean():
    units = [GeneratorUnit(100, 5, 0.05), GeneratorUnit(300, 10, 0.05)]
    assert aggregate_inertia(units, 400) == pytest.approx(8.75)


def test_aggregate_inertia_single_unit():
    assert aggregate_inertia([GeneratorUnit(200, 7, 0.05)], 200) == pytest.approx(7.0)


def test_aggregate_droop_identical_units():
    units = [GeneratorUnit(100, 5, 0.05), GeneratorUnit(100, 5, 0.05)]
    assert aggregate_droop(units, 200) == pytest.approx(0.05)


def test_aggregate_droop_harmonic():
    units = [GeneratorUnit(100, 5, 0.04), GeneratorUnit(100, 5, 0.08)]
    assert aggregate_droop(units, 200) == pytest.approx(0.16 / 3)


def test_aggregate_rejects_empty_and_bad_units():
    with pytest.raises(InvalidInputError):
        aggregate_inertia([], 100)
    with pytest.raises(InvalidInputError):
        aggregate_droop([], 100)
    with pytest.raises(InvalidInputError):
        GeneratorUnit(100, 5, 0.0)
    with pytest.raises(InvalidInputError):
        GeneratorUnit(0, 5, 0.05)


# -- derive ----------------------------------------------------------------------


def test_toy_derived_hand_values(toy):
    # DR+Km = 1 and 2HR*TR = 4, so omega_n = 0.5 and zeta = (0.5 + 0.335*8)/2 * 0.5
    assert toy.omega_n == pytest.approx(0.5, rel=1e-15)
    assert toy.zeta == pytest.approx(0.795, rel=1e-14)
    assert toy.omega_r == pytest.approx(toy.omega_n * math.sqrt(1 - toy.zeta**2), rel=1e-15)
    assert toy.g1 == pytest.approx(-0.05)
    assert toy.k_lse == pytest.approx(-10.0, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(params_st)
def test_k_lse_equals_minus_two_h(p):
    # alpha*sin(phi1) = T_R*omega_n, which collapses k_lse to -2H: g(0) = -dP/(2H)
    d = _underdamped(p)
    assert d.k_lse == pytest.approx(-2.0 * p.h, rel=1e-10)
    assert rocof(d, 1.0, 0.0) == pytest.approx(-1.0 / (2.0 * p.h), rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(params_st)
def test_derive_is_pure_and_consistent(p):
    d = _underdamped(p)
    assert derive(p) == d
    assert d.omega_n > 0 and d.alpha > 0 and 0 < d.phi1 < math.pi
    assert d.omega_r == pytest.approx(d.omega_n * math.sqrt(1 - d.zeta**2), rel=1e-14)
    # delta_f starts at zero: 1 + alpha sin(Phi) = 0
    assert 1.0 + d.alpha * math.sin(d.phi) == pytest.approx(0.0, abs=1e-12)


def test_overdamped_rejected():
    p = SystemParams(h=0.5, d=1.0, r=0.05, km=0.95, fh=0.9, tr=8.0, s_base=100.0)
    with pytest.raises(UnsupportedRegimeError):
        derive(p)


@pytest.mark.parametrize(
    "kw",
    [dict(h=0), dict(r=-1), dict(tr=0), dict(s_base=0), dict(d=-0.1), dict(fh=1.5), dict(f_nominal=0)],
)
def test_system_params_validation(kw):
    base = dict(h=5.0, d=1.0, r=0.05, km=0.95, fh=0.3, tr=8.0, s_base=100.0)
    base.update(kw)
    with pytest.raises(InvalidInputError):
        SystemParams(**base)


# -- closed form -----------------------------------------------------------------


def test_zero_forcing(toy):
    t = np.linspace(0, 30, 101)
    assert np.all(delta_f(toy, 0.0, t) == 0.0)
    assert np.all(rocof(toy, 0.0, t) == 0.0)


def test_steady_state_limit(toy):
    # -R dP / (DR + Km) = -0.05 * 0.1 / 1
    assert delta_f(toy, 0.1, 200.0) == pytest.approx(-0.005, abs=1e-9)
    assert delta_f(toy, 0.1, 200.0) * 50 == pytest.approx(-0.25, abs=1e-7)


def test_negative_time_is_zero(toy):
    assert delta_f(toy, 1.0, -0.5) == 0.0
    assert rocof(toy, 1.0, -0.5) == 0.0


def test_single_event_superposition_equals_delta_f(toy):
    t = np.linspace(0, 20, 401)
    np.testing.assert_array_equal(delta_f_multi(toy, [PowerEvent(0.0, 0.3)], t), delta_f(toy, 0.3, t))


def test_cancelling_events(toy):
    t = np.linspace(0, 20, 401)
    out = delta_f_multi(toy, [PowerEvent(0.0, 0.3), PowerEvent(0.0, -0.3)], t)
    assert np.max(np.abs(out)) == 0.0


@settings(max_examples=40, deadline=None)
@given(
    params_st,
    st.lists(st.tuples(st.floats(0, 10), st.floats(-2, 2)), min_size=1, max_size=4),
)
def test_superposition_is_exact_sum(p, evs):
    d = _underdamped(p)
    events = [PowerEvent(t, dp) for t, dp in sorted(evs)]
    t = np.linspace(0, 20, 97)
    expected = sum(np.asarray(delta_f(d, e.delta_p, t - e.time)) for e in events)
    np.testing.assert_allclose(delta_f_multi(d, events, t), expected, rtol=0, atol=1e-15)


def test_unsorted_events_rejected(toy):
    with pytest.raises(InvalidInputError):
        delta_f_multi(toy, [PowerEvent(1.0, 0.1), PowerEvent(0.0, 0.1)], 2.0)


def test_rocof_matches_numerical_derivative(toy):
    t = np.linspace(0.5, 25, 50)
    h = 1e-6
    num = (delta_f(toy, 0.2, t + h) - delta_f(toy, 0.2, t - h)) / (2 * h)
    np.testing.assert_allclose(rocof(toy, 0.2, t), num, atol=1e-9)
    np.testing.assert_allclose(rocof_hz(toy, 0.2, t), num * 50, atol=1e-7)


def test_rocof_multi_superposes(toy):
    evs = [PowerEvent(0.0, 0.2), PowerEvent(1.0, -0.05)]
    t = np.linspace(0, 10, 41)
    expected = rocof(toy, 0.2, t) + rocof(toy, -0.05, t - 1.0)
    np.testing.assert_allclose(rocof_multi(toy, evs, t), expected, atol=1e-16)


# -- nadir and threshold ---------------------------------------------------------------


def test_ieee24_nadir_time(derived):
    assert t_nadir(derived) == pytest.approx(3.72, abs=0.005)


def test_ieee24_threshold_loss(derived):
    assert threshold_power_loss_mw(derived, 49.5) == pytest.approx(351.90, abs=0.01)


def test_ieee24_nadir_at_threshold_is_49_5(derived):
    dps = threshold_power_loss(derived, 49.5)
    assert f_nadir(derived, dps) == pytest.approx(49.5, abs=1e-9)
    # grid search over the curve finds the same minimum
    t = np.arange(0, 20, 1e-3)
    f = 50 * (1 + delta_f(derived, dps, t))
    assert f.min() == pytest.approx(49.5, abs=1e-6)
    assert abs(t[np.argmin(f)] - t_nadir(derived)) <= 1e-3


def test_ieee24_nadir_twice_threshold(derived):
    dps = threshold_power_loss(derived, 49.5)
    assert f_nadir(derived, 2 * dps) == pytest.approx(50 - 2 * 0.5, abs=1e-9)


def test_ieee24_initial_rocof_steeper_than_top_row(derived):
    dps = threshold_power_loss(derived, 49.5)
    g0 = rocof_hz(derived, dps, 0.0)
    assert g0 == pytest.approx(dps / derived.k_lse * 50, rel=1e-12)
    assert g0 < -0.3236


def test_shed_after_loss_keeps_nadir_near_49_5(derived):
    s = derived.params.s_base
    evs = [PowerEvent(0.0, 500 / s), PowerEvent(0.96, -148.3 / s)]
    t = np.arange(0, 20, 1e-3)
    f = 50 * (1 + delta_f_multi(derived, evs, t))
    assert f.min() == pytest.approx(49.5, abs=0.05)


def test_threshold_at_nominal_is_zero(derived):
    assert threshold_power_loss(derived, 50.0) == 0.0


def test_threshold_above_nominal_rejected(derived):
    with pytest.raises(InvalidInputError):
        threshold_power_loss(derived, 50.1)


@settings(max_examples=60, deadline=None)
@given(params_st, st.floats(0.05, 5.0), st.floats(49.0, 49.99))
def test_nadir_properties(p, dp, fs):
    d = _underdamped(p)
    tn = t_nadir(d)
    assert abs(rocof(d, dp, tn)) < 1e-9
    # threshold loss is the exact inverse of f_nadir
    assert f_nadir(d, threshold_power_loss(d, fs)) == pytest.approx(fs, abs=1e-9)
    # nadir depth proportional to the loss
    assert (50 - f_nadir(d, 2 * dp)) == pytest.approx(2 * (50 - f_nadir(d, dp)), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(params_st)
def test_nadir_arctan_form(p):
    d = _underdamped(p)
    if d.sigma * p.tr > 1.0:
        assert t_nadir_arctan(d) == pytest.approx(t_nadir(d), rel=1e-12)
    elif d.sigma * p.tr < 1.0:
        assert t_nadir_arctan(d) + math.pi / d.omega_r == pytest.approx(t_nadir(d), rel=1e-12)


# -- ODE oracle ----------------------------------------------------------------------


def test_ode_no_events_flat(toy_params):
    tr = ode_oracle(toy_params, [], 5.0)
    assert np.all(tr.f_hz == 50.0)


def test_ode_matches_closed_form_toy(toy_params, toy):
    tr = ode_oracle(toy_params, [PowerEvent(0.0, 0.1)], 30.0)
    cf = delta_f(toy, 0.1, tr.t)
    assert np.max(np.abs(tr.meta["delta_f_pu"] - cf)) < 1e-6


def test_ode_matches_two_events(toy_params, toy):
    evs = [PowerEvent(0.0, 0.1), PowerEvent(2.0005, -0.04)]
    tr = ode_oracle(toy_params, evs, 30.0)
    assert np.max(np.abs(tr.meta["delta_f_pu"] - delta_f_multi(toy, evs, tr.t))) < 1e-6


def test_ode_runs_overdamped():
    p = SystemParams(h=0.5, d=1.0, r=0.05, km=0.95, fh=0.9, tr=8.0, s_base=100.0)
    tr = ode_oracle(p, [PowerEvent(0.0, 0.1)], 60.0)
    assert tr.meta["delta_f_pu"][-1] == pytest.approx(-0.005, abs=1e-5)


def test_ode_rejects_coarse_step(toy_params):
    with pytest.raises(InvalidInputError):
        ode_oracle(toy_params, [], 1.0, dt=0.01)


# -- sampling and noise ---------------------------------------------------------------


def test_noiseless_samples_on_curve(derived):
    evs = [PowerEvent(0.0, 2.0 / 10)]
    tr = sample_trajectory(derived, evs, 3.0)
    np.testing.assert_array_equal(tr.f_hz, 50 * (1 + delta_f_multi(derived, evs, tr.t)))
    assert np.allclose(np.diff(tr.t), SAMPLE_PERIOD)
    assert tr.rocof_hz is None


def test_sampling_deterministic(derived):
    evs = [PowerEvent(0.0, 0.2)]
    a = sample_trajectory(derived, evs, 2.0, NoiseModel("uniform", 0.01), seed=7)
    b = sample_trajectory(derived, evs, 2.0, NoiseModel("uniform", 0.01), seed=7)
    assert a.f_hz.tobytes() == b.f_hz.tobytes()


def test_uniform_noise_support_and_std():
    nm = NoiseModel("uniform", 0.01)
    x = nm.draw(np.random.default_rng(1), 100_000)
    assert np.all(np.abs(x) <= 0.01)
    assert x.max() > 0.0099 and x.min() < -0.0099
    assert nm.std == pytest.approx(0.01 / math.sqrt(3))
    assert x.std() == pytest.approx(nm.std, rel=0.01)


def test_noise_model_validation():
    with pytest.raises(InvalidInputError):
        NoiseModel("pink", 0.01)
    with pytest.raises(InvalidInputError):
        NoiseModel("uniform", -1.0)


# -- CSV ---------------------------------------------------------------------------------


def test_csv_roundtrip(tmp_path, derived):
    tr = sample_trajectory(derived, [PowerEvent(0.0, 0.2)], 1.0, with_rocof=True)
    p = tmp_path / "t.csv"
    write_trajectory_csv(p, tr, ["hello"])
    text = p.read_text().splitlines()
    assert text[0] == "# hello"
    assert text[1] == "t_s,f_hz,rocof_hz_per_s"
    back = read_trajectory_csv(p)
    np.testing.assert_array_equal(back.t, tr.t)
    np.testing.assert_array_equal(back.f_hz, tr.f_hz)
    np.testing.assert_array_equal(back.rocof_hz, tr.rocof_hz)


@pytest.mark.parametrize(
    "body, line",
    [
        ("t,f\n0,50\n", 1),
        ("t_s,f_hz,rocof_hz_per_s\n0.0,50.0,\n0.016,abc,\n", 3),
        ("t_s,f_hz,rocof_hz_per_s\n0.0,50.0,\n0.0,49.9,\n", 3),
        ("# c\nt_s,f_hz,rocof_hz_per_s\n0.0,50.0,\n0.016\n", 4),
    ],
)
def test_csv_errors_carry_line_numbers(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(TrajectoryParseError, match=f"line {line}"):
        read_trajectory_csv(p)


def test_trajectory_nadir():
    tr = Trajectory(np.array([0.0, 1.0, 2.0]), np.array([50.0, 49.6, 49.8]))
    assert tr.nadir() == (1.0, 49.6)
    assert [s.f for s in tr] == [50.0, 49.6, 49.8]
