import math

import numpy as np
import pytest

from model import ROLE_DOSE_P, ROLE_G, ROLE_LAMBDA, ROLE_R, ROLE_SIGMA2, FunctionSpec, JumpSizeLaw
from presets import preset_model
from spinal import (EVENT_KINDS, Lane, MeanFieldCurve, SpinalError, SpinalVariant, couple, couple_ensemble,
                    hitting_times, reservoir_floor, simulate_spinal, simulate_spinal_ensemble, solve_mean_field,
                    spinal_expectation)


def test_variant_parse_and_label():
    assert SpinalVariant.parse("Ybar:2.5").ybar == 2.5
    assert SpinalVariant.parse("Yplus:10").label == "Yplus:10"
    assert SpinalVariant.parse("Ytilde").label == "Ytilde"
    with pytest.raises(SpinalError):
        SpinalVariant("Z")
    with pytest.raises(SpinalError):
        SpinalVariant("Ytildetilde", lambda_floor=0.0)


def test_mean_field_curve_left_node(tmp_path):
    curve = MeanFieldCurve(np.array([0.0, 1.0, 2.0]), np.array([1.0, 2.0, 3.0]), True, 3, 1e-4)
    assert curve(0.5) == 1.0
    assert curve(1.0) == 2.0
    assert curve(10.0) == 3.0
    path = curve.to_csv(tmp_path / "mf.csv")
    assert path.read_text(encoding="utf-8").splitlines()[1] == "0.0,1.0,1,3,0.0001,"
    with pytest.raises(SpinalError):
        MeanFieldCurve(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_lane_needs_curve_for_varying_lysis(full_death):
    with pytest.raises(SpinalError):
        Lane(SpinalVariant("Y"), full_death, 1.0)
    Lane(SpinalVariant("Ybar", ybar=1.0), full_death, 1.0)


def test_yplus_needs_positive_floor(pure_fragmentation, full_death):
    with pytest.raises(SpinalError):
        Lane(SpinalVariant("Yplus", x1=2.0), pure_fragmentation, 1.0)
    assert reservoir_floor(full_death, 2.0) == pytest.approx(0.3)


def test_single_path_event_log(full_death, stream):
    mf = MeanFieldCurve.constant(1.0, [0.0])
    traj = simulate_spinal(SpinalVariant("Y"), 1.0, 5.0, mf, full_death, stream(), dt=1e-2)
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(5.0)
    times = [e.time for e in traj.events]
    assert times == sorted(times)
    assert {e.kind for e in traj.events} <= set(EVENT_KINDS)
    assert traj.count("division-jump") > 0
    assert all(0 < e.magnitude < 1 for e in traj.events if e.kind == "division-jump")


def test_ytilde_has_no_reinfection(full_death, stream):
    traj = simulate_spinal(SpinalVariant("Ytilde"), 1.0, 3.0, None, full_death, stream(), dt=1e-2)
    assert traj.count("reservoir-dose") == 0
    assert traj.count("lysis-dose") == 0


def test_yplus_drops_reservoir_after_reaching_three_x1(full_death, stream):
    model = full_death.with_(g=FunctionSpec("linear", (2.0,), ROLE_G))
    # started above 3 x1: switched from the start
    traj = simulate_spinal(SpinalVariant("Yplus", x1=0.2), 1.0, 2.0, None, model, stream(), dt=1e-2)
    assert traj.count("reservoir-dose") == 0
    assert traj.count("lysis-dose") == 0
    hits = doses = 0
    for i in range(20):
        traj = simulate_spinal(SpinalVariant("Yplus", x1=0.5), 1.0, 3.0, None, model, stream(index=i), dt=1e-2)
        times = [e.time for e in traj.events if e.kind == "reservoir-dose"]
        doses += len(times)
        reached = np.nonzero(traj.loads >= 1.5)[0]
        if reached.size:
            hits += 1
            assert all(t <= traj.times[reached[0]] for t in times)
    assert hits >= 5
    assert doses > 0


def test_pure_fragmentation_mean_decays(pure_fragmentation, stream):
    # divisions at rate 2b halve the load on average: E[Y_t] = x0 e^{-b t}
    res = simulate_spinal_ensemble(SpinalVariant("Y"), 1.0, 1.0, None, pure_fragmentation, stream(), 20000,
                                   dt=1e-2, record_times=[0.0, 0.5, 1.0])
    for j, t in enumerate([0.0, 0.5, 1.0]):
        vals = res.values[0, j]
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-t)) <= 4 * se + 1e-12
    assert np.all(res.running_max[0, -1] >= res.values[0, -1])


def test_load_dependent_reservoir_mean(stream):
    # lambda(x) = 0.4 x with doses 0.5: E[Y_t] = e^{(0.3 + 0.2 - 1) t}
    model = preset_model("subcritical")
    res = simulate_spinal_ensemble(SpinalVariant("Y"), 1.0, 1.0, None, model, stream(), 20000, dt=5e-2,
                                   record_times=[0.5, 1.0])
    for j, t in enumerate([0.5, 1.0]):
        vals = res.values[0, j]
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - math.exp(-0.5 * t)) < 4 * se + 0.01
    assert res.counts["reservoir-dose"].sum() > 0


def test_reservoir_bound_per_variant(full_death):
    lo, hi = np.array([0.0, 2.0]), np.array([1.0, 8.0])
    switched = np.array([False, True])
    linear = full_death.with_(lam=FunctionSpec("linear", (0.5,), ROLE_LAMBDA))
    assert Lane(SpinalVariant("Ybar", ybar=1.0), linear, 1.0).reservoir_bound(lo, hi, switched) == \
        pytest.approx([0.5, 4.0])
    assert Lane(SpinalVariant("Ybar", ybar=1.0), full_death, 1.0).reservoir_bound(lo, hi, switched) == \
        pytest.approx([0.3, 0.3])
    assert np.all(Lane(SpinalVariant("Ytilde"), full_death, 1.0).reservoir_bound(lo, hi, switched) == 0.0)
    plus = Lane(SpinalVariant("Yplus", x1=2.0), full_death, 1.0)
    assert plus.reservoir_bound(lo, hi, switched) == pytest.approx([0.3, 0.0])


def test_linear_mean_field_ode(linear_mf, stream):
    # m' = (0.5 - 1) m + 0.3, m(0) = 1
    grid = np.linspace(0.0, 4.0, 81)
    curve = solve_mean_field(linear_mf, 1.0, 4.0, grid, 1e-3, 5, 10000, stream(), dt=1e-2)
    exact = 0.6 + 0.4 * np.exp(-0.5 * grid)
    assert curve.converged
    assert np.max(np.abs(curve.values - exact)) < 0.05 * 0.6


def test_picard_converges_with_lysis(linear_mf, stream):
    model = linear_mf.with_(r=FunctionSpec("saturating-hill", (0.3, 1.0), ROLE_R),
                            dose_p=JumpSizeLaw("point-mass", (1.0,), ROLE_DOSE_P))
    grid = np.linspace(0.0, 1.0, 21)
    curve = solve_mean_field(model, 1.0, 1.0, grid, 1e-3, 10, 2000, stream(), dt=1e-2)
    assert curve.converged
    assert 1 < curve.iterations <= 6
    assert curve.residual <= 1e-3


def test_mean_field_requires_replicates(linear_mf, stream):
    with pytest.raises(SpinalError):
        solve_mean_field(linear_mf, 1.0, 1.0, [0.0, 1.0], 1e-3, 5, 500, stream())


def test_explosive_mean_field_reports_inf(pure_fragmentation, stream):
    model = pure_fragmentation.with_(g=FunctionSpec("power", (1.0, 2.0), ROLE_G), b=0.01)
    grid = np.linspace(0.0, 2.0, 11)
    curve = solve_mean_field(model, 1.0, 2.0, grid, 1e-3, 5, 1000, stream(), dt=1e-3, x_explode=1e6)
    assert curve.exploded
    assert not curve.converged
    assert "explosive" in curve.note


def _ordered_models(full_death):
    a = full_death.with_(g=FunctionSpec("linear", (0.1,), ROLE_G), lam=FunctionSpec("constant", (0.1,), ROLE_LAMBDA))
    b = full_death.with_(g=FunctionSpec("linear", (0.4,), ROLE_G), lam=FunctionSpec("constant", (0.3,), ROLE_LAMBDA))
    return a, b


def test_coupling_keeps_order(full_death, stream):
    a, b = _ordered_models(full_death)
    mf = MeanFieldCurve.constant(1.0, [0.0])
    res = couple_ensemble(SpinalVariant("Y"), 0.5, a, SpinalVariant("Y"), 1.0, b, 2.0, stream(), 1000,
                          mf_a=mf, mf_b=mf, dt=1e-2)
    assert res.crossings == 0
    assert np.all(res.reservoir_a <= res.reservoir_b)


def test_coupled_diffusions_never_cross(pure_fragmentation, stream):
    # with sigma2 and g linear, the clamped Euler step is monotone in the load
    model = pure_fragmentation.with_(g=FunctionSpec("linear", (0.2,), ROLE_G),
                                     sigma2=FunctionSpec("linear", (1.0,), ROLE_SIGMA2))
    res = couple_ensemble(SpinalVariant("Y"), 1.0, model, SpinalVariant("Y"), 1.05, model, 1.0, stream(), 1000,
                          dt=1e-2)
    assert res.crossings == 0
    assert res.violations == 0


def test_couple_single_pair(full_death, stream):
    a, b = _ordered_models(full_death)
    lo, hi = couple(SpinalVariant("Ytilde"), 0.5, a, SpinalVariant("Ybar", ybar=1.0), 1.0, b, 1.0, stream(),
                    dt=1e-2)
    assert np.all(lo.loads <= hi.loads + 1e-9)
    assert lo.count("reservoir-dose") == 0


def test_coupling_precondition(full_death, stream):
    a, b = _ordered_models(full_death)
    with pytest.raises(SpinalError):
        couple_ensemble(SpinalVariant("Ytilde"), 2.0, a, SpinalVariant("Ytilde"), 1.0, b, 1.0, stream(), 10)
    with pytest.raises(SpinalError):
        couple_ensemble(SpinalVariant("Ytilde"), 0.5, b, SpinalVariant("Ytilde"), 1.0, a, 1.0, stream(), 10)
    with pytest.raises(SpinalError):
        couple_ensemble(SpinalVariant("Ytilde"), 0.5, a.with_(b=2.0), SpinalVariant("Ytilde"), 1.0, b, 1.0,
                        stream(), 10)


def test_spinal_expectation(pure_fragmentation, stream):
    assert spinal_expectation("1", SpinalVariant("Y"), 1.0, pure_fragmentation, None, 100, stream()) == (1.0, 0.0)
    with pytest.raises(SpinalError):
        spinal_expectation("identity", SpinalVariant("Y"), 1.0, pure_fragmentation, None, 10, stream())
    est, se = spinal_expectation("identity", SpinalVariant("Y"), 1.0, pure_fragmentation, None, 20000, stream(),
                                 dt=1e-2)
    assert abs(est - math.exp(-1.0)) < 4 * se


def test_hitting_times(pure_fragmentation, stream):
    assert np.all(hitting_times(SpinalVariant("Y"), 0.4, 0.5, "down", 1.0, pure_fragmentation, None, 10,
                                stream()) == 0.0)
    hits = hitting_times(SpinalVariant("Y"), 1.0, 0.5, "down", 1.0, pure_fragmentation, None, 2000, stream(),
                         dt=1e-2)
    done = np.isfinite(hits)
    assert done.any() and (~done).any()
    assert np.all((hits[done] > 0) & (hits[done] <= 1.0 + 1e-9))
    with pytest.raises(SpinalError):
        hitting_times(SpinalVariant("Y"), 1.0, 0.5, "sideways", 1.0, pure_fragmentation, None, 10, stream())
