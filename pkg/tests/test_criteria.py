import math

import numpy as np
import pytest
from scipy import integrate, special

from criteria import (HEURISTIC, INCONCLUSIVE, LN_CONSISTENT, SN_CONSISTENT, CriteriaError, D, G_a, I_a,
                      check_LN, check_SN, coming_down_check, criteria_scan, explosion_probability, in_A,
                      l_schedule, markov_bound_check, martingale_Za_check, rho)
from model import ROLE_PI, FragmentationLaw, JumpSizeLaw
from presets import preset_model


def _inner_closed(a, u):
    """int_0^1 (1 + u v)^(-1-a) (1 - v) dv for a != 1."""
    return (1.0 - np.expm1((1.0 - a) * np.log1p(u)) / ((1.0 - a) * u)) / (a * u)


def test_rho_subcritical_is_linear():
    model = preset_model("subcritical")
    assert rho(2.0, model) == pytest.approx(-1.0)
    assert rho(10.0, model) == pytest.approx(-5.0)
    assert rho(0.0, model) == 0.0
    with pytest.raises(CriteriaError):
        rho(-1.0, model)


def test_I_a_point_mass_closed_form():
    pi = JumpSizeLaw("point-mass", (1.0,), ROLE_PI)
    # a = 2: the inner integral is 1 / (2 (1 + u))
    assert I_a(2.0, 10.0, pi) == pytest.approx(2.0 * 0.01 / (2.0 * 1.1), rel=1e-9)


@pytest.mark.parametrize("a,x,z0,mass", [(0.5, 1.0, 0.2, 1.0), (2.0, 10.0, 0.5, 3.0), (1.5, 3.0, 1.0, 0.5)])
def test_I_a_point_mass_general(a, x, z0, mass):
    pi = JumpSizeLaw("point-mass", (z0,), ROLE_PI, mass)
    expected = a * mass * z0 ** 2 * _inner_closed(a, z0 / x) / x ** 2
    assert I_a(a, x, pi) == pytest.approx(expected, rel=1e-8)


def test_I_a_exponential_against_direct_quadrature():
    a, x, m = 1.5, 2.0, 0.5
    pi = JumpSizeLaw("exponential", (m,), ROLE_PI)
    expected = a / x ** 2 * integrate.quad(
        lambda z: z * z * _inner_closed(a, z / x) * math.exp(-z / m) / m, 0.0, math.inf, epsabs=1e-13)[0]
    assert I_a(a, x, pi) == pytest.approx(expected, rel=1e-6)


def test_I_a_zero_mass_and_rejections():
    assert I_a(1.5, 2.0, JumpSizeLaw("exponential", (1.0,), ROLE_PI, 0.0)) == 0.0
    pi = JumpSizeLaw("point-mass", (1.0,), ROLE_PI)
    with pytest.raises(CriteriaError):
        I_a(0.0, 1.0, pi)
    with pytest.raises(CriteriaError):
        I_a(1.0, 0.0, pi)


def test_G_D_identity(full_death):
    a = 1.5
    # E[Theta^(1-a)] for the symmetric Beta(2, 2)
    moment = special.beta(2.0 + (1.0 - a), 2.0) / special.beta(2.0, 2.0)
    frag = 2.0 * full_death.b * (1.0 - moment) / (1.0 - a)
    r_at = full_death.r(1.0)
    assert r_at == pytest.approx(0.2)
    for x in (0.5, 3.0, 40.0):
        inc = (1.0 + 0.3 / x) ** (1.0 - a) - 1.0
        expected = (a - 1.0) * (D(a, x, full_death) - frag) - r_at * inc
        assert G_a(a, x, 1.0, full_death) == pytest.approx(expected, rel=1e-10)


def test_D_at_one_is_the_limit(full_death):
    x = 2.5
    d1 = D(1.0, x, full_death)
    assert math.isfinite(d1)
    assert D(1.0 + 1e-6, x, full_death) == pytest.approx(d1, abs=1e-4)
    assert D(1.0 - 1e-6, x, full_death) == pytest.approx(d1, abs=1e-4)


def test_D_pure_growth():
    model = preset_model("supercritical")
    # g/x - a sigma2/x^2 with g = 1.5x, sigma2 = 0.1x
    assert D(0.5, 4.0, model) == pytest.approx(1.5 - 0.5 * 0.1 / 4.0)


def test_in_A():
    uni = FragmentationLaw("uniform01")
    assert in_A(1.5, uni)
    assert not in_A(2.0, uni)
    assert in_A(5.0, FragmentationLaw("point-mass-half"))
    with pytest.raises(CriteriaError):
        in_A(0.5, uni)


def test_G_a_rejects_inadmissible(pure_fragmentation):
    with pytest.raises(CriteriaError):
        G_a(1.0, 1.0, 1.0, pure_fragmentation)
    with pytest.raises(CriteriaError):
        G_a(2.0, 1.0, 1.0, pure_fragmentation)


def test_G_pure_fragmentation_constant(pure_fragmentation):
    # (a-1) * (-2b (1 - 1/(2-a)) / (1-a)) = 2b (1 - 2/3) at a = 0.5
    assert G_a(0.5, 7.0, 1.0, pure_fragmentation) == pytest.approx(2.0 / 3.0)


def test_check_SN_subcritical():
    rep = check_SN(preset_model("subcritical"), 0.5)
    assert rep.verdict == SN_CONSISTENT
    assert rep.marker == HEURISTIC
    out = rep.as_dict()
    assert out["marker"] == HEURISTIC and len(out["D"]) == len(out["grid"])
    with pytest.raises(CriteriaError):
        check_SN(preset_model("subcritical"), 1.5)


@pytest.mark.parametrize("name", ["strong-growth", "no-reservoir-explosive"])
def test_check_LN_strong_growth(name):
    rep = check_LN(preset_model(name), 1.5, 0.5)
    assert rep.verdict == LN_CONSISTENT
    assert rep.diagnostics["x0"] <= rep.diagnostics["tail_from"]
    assert rep.diagnostics["min_margin"] > 0


def test_check_LN_linear_growth_is_inconclusive():
    rep = check_LN(preset_model("supercritical"), 1.5, 0.5)
    assert rep.verdict == INCONCLUSIVE


def test_check_LN_rejections(pure_fragmentation):
    with pytest.raises(CriteriaError):
        check_LN(pure_fragmentation, 2.0, 0.5)
    with pytest.raises(CriteriaError):
        check_LN(pure_fragmentation, 1.5, 0.0)


def test_criteria_scan_verdicts(tmp_path):
    rep = criteria_scan(preset_model("strong-growth"))
    assert rep.verdict == LN_CONSISTENT
    assert {c["a"] for c in rep.checks} == {0.25, 0.5, 0.75, 1.5}
    assert all(c["marker"] == HEURISTIC for c in rep.checks)
    assert criteria_scan(preset_model("subcritical")).verdict == SN_CONSISTENT
    assert rep.to_json(tmp_path / "criteria.json").exists()
    assert rep.to_csv(tmp_path / "criteria.csv").exists()


def test_criteria_grid_validation():
    model = preset_model("subcritical")
    with pytest.raises(CriteriaError):
        check_SN(model, 0.5, grid=[1.0, 10.0, 1e12])
    with pytest.raises(CriteriaError):
        check_SN(model, 0.5, grid=np.logspace(0, 6, 20))


@pytest.mark.parametrize("b_frak,delta,eta", [(20.0, 0.5, 0.5), (100.0, 1.0, 1.0), (1e4, 0.25, 2.0)])
def test_l_schedule_against_hurwitz_zeta(b_frak, delta, eta):
    c = math.log1p(delta)
    L = math.log(math.log(b_frak))
    s = 1.0 + eta
    expected = c ** (-s) * special.zeta(s, L / c)
    sched = l_schedule(b_frak, delta, eta)
    assert sched.lower <= expected <= sched.upper
    assert sched.value == pytest.approx(expected, rel=1e-7)


def test_l_schedule_rejections():
    with pytest.raises(CriteriaError):
        l_schedule(20.0, 0.5, 0.0)
    with pytest.raises(CriteriaError):
        l_schedule(20.0, 0.0, 0.5)
    with pytest.raises(CriteriaError):
        l_schedule(2.0, 0.5, 0.5)


def test_martingale_pure_fragmentation(pure_fragmentation, stream):
    res = martingale_Za_check(0.5, 1e-3, 1e3, [0.0, 0.5, 1.0, 2.0], pure_fragmentation, 1.0, None, 10000,
                              stream("martingale"), dt=1e-2)
    assert res.target == 1.0
    assert res.estimates[0] == 1.0 and res.z_scores[0] == 0.0
    assert res.max_abs_z < 3.0
    assert 0.0 <= res.exited <= 1.0


def test_martingale_above_one(stream):
    model = preset_model("fragmentation-diffusion", {"kappa": {"family": "point-mass-half"}})
    res = martingale_Za_check(1.5, 1e-3, 1e3, [0.5, 1.0], model, 1.0, None, 4000, stream("martingale-a"),
                              dt=2e-3)
    assert res.max_abs_z < 3.0


@pytest.mark.slow
def test_martingale_uniform_fragmentation_above_one(stream):
    model = preset_model("fragmentation-diffusion")
    assert model.kappa.family == "uniform01"
    res = martingale_Za_check(1.5, 1e-3, 1e3, [0.0, 0.5, 1.0, 2.0], model, 1.0, None, 10000,
                              stream("martingale-uniform"), dt=1e-2)
    assert res.max_abs_z < 3.0


def test_martingale_rejections(pure_fragmentation, stream):
    with pytest.raises(CriteriaError):
        martingale_Za_check(0.5, 2.0, 1e3, [1.0], pure_fragmentation, 1.0, None, 10, stream())
    with pytest.raises(CriteriaError):
        martingale_Za_check(2.0, 1e-3, 1e3, [1.0], pure_fragmentation, 1.0, None, 10, stream())


def test_explosion_probability(stream):
    p, se = explosion_probability(preset_model("subcritical"), 1.0, 1.0, 1000, stream("sub"), dt=1e-2)
    assert p == 0.0 and se == 0.0
    with pytest.raises(CriteriaError):
        explosion_probability(preset_model("subcritical"), 1.0, 1.0, 999, stream())


def test_explosion_sentinel_insensitive(stream):
    model = preset_model("strong-growth")
    p1, _ = explosion_probability(model, 1e6, 0.2, 1000, stream("boom"), dt=1e-3, x_explode=1e12)
    p2, _ = explosion_probability(model, 1e6, 0.2, 1000, stream("boom"), dt=1e-3, x_explode=2e12)
    assert p1 > 0.5
    assert abs(p1 - p2) <= 0.2 * p1


def test_coming_down(stream):
    model = preset_model("coming-down")
    res = coming_down_check(model, [1e3], 20.0, 0.5, 0.5, 0.5, 200, stream("down"), dt=1e-2)
    assert res.bound == pytest.approx(math.exp(-8.0 * 20.0 ** -0.25))
    assert res.passed
    assert res.rows[0]["estimate"] > 0.9
    assert res.as_dict()["marker"] == HEURISTIC


def test_coming_down_needs_no_lysis(stream):
    model = preset_model("coming-down", {"r": {"family": "constant", "params": [0.5]},
                                         "dose_p": {"family": "point-mass", "params": [1.0]}})
    with pytest.raises(CriteriaError):
        coming_down_check(model, [1e3], 20.0, 0.5, 0.5, 0.5, 10, stream())
    with pytest.raises(CriteriaError):
        coming_down_check(preset_model("coming-down"), [1e3], 20.0, 0.5, 0.5, 1.5, 10, stream())


def test_markov_bound(stream):
    res = markov_bound_check(preset_model("subcritical"), 1.0, [2.0, 5.0], None, 2000, stream("markov"), dt=1e-2)
    assert res.passed
    assert [row["K"] for row in res.rows] == [2.0, 5.0]
    assert all(row["estimate"] <= row["bound"] + 3 * row["se"] + 1e-3 for row in res.rows)
