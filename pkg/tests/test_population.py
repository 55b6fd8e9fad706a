import logging
import math

import numpy as np
import pytest

from model import ROLE_G, FunctionSpec
from population import (Caps, CellLabel, PopulationError, birth_death_pmf, many_to_one_check, mean_cells,
                        sample_N, sample_population, simulate_population, survival_fraction_stats,
                        survival_probability, trend_test)
from presets import preset_model
from spinal import solve_mean_field
from streams import DriverStream


def test_cell_labels():
    root = CellLabel()
    left, right = root.children()
    assert str(root) == "root"
    assert (left.word, right.word) == ("0", "1")
    assert left.children()[1].depth == 2
    assert root.is_ancestor_of(left.children()[0])
    assert not left.is_ancestor_of(right)
    assert not left.is_ancestor_of(left)
    with pytest.raises(PopulationError):
        CellLabel("012")


def test_caps_validated():
    with pytest.raises(PopulationError):
        Caps(0)


def test_birth_death_law_values():
    e = math.exp(0.5)
    alpha = 0.5 * (e - 1) / (e - 0.5)
    beta = (e - 1) / (e - 0.5)
    assert birth_death_pmf(1.0, 0.5, 1.0, 0) == pytest.approx(alpha)
    assert birth_death_pmf(1.0, 0.5, 1.0, 3) == pytest.approx((1 - alpha) * (1 - beta) * beta ** 2)
    assert survival_probability(1.0, 0.5, 1.0) == pytest.approx(1 - alpha)
    pmf = [birth_death_pmf(1.0, 0.5, 1.0, n) for n in range(400)]
    assert sum(pmf) == pytest.approx(1.0, abs=1e-12)
    assert sum(n * p for n, p in enumerate(pmf)) == pytest.approx(mean_cells(1.0, 0.5, 1.0), rel=1e-10)
    assert birth_death_pmf(1.0, 0.5, 0.0, 1) == 1.0
    with pytest.raises(PopulationError):
        birth_death_pmf(1.0, 1.0, 1.0, 2)


def test_birth_death_large_times_are_finite():
    assert birth_death_pmf(1.0, 0.5, 5000.0, 0) == pytest.approx(0.5)
    assert survival_probability(0.5, 1.0, 5000.0) == pytest.approx(0.0, abs=1e-300)


def test_sample_N_matches_pmf(stream):
    draws = sample_N(1.0, 0.5, 1.0, stream(), size=100000)
    counts = np.bincount(draws, minlength=200)
    tv = 0.5 * sum(abs(counts[n] / draws.size - birth_death_pmf(1.0, 0.5, 1.0, n)) for n in range(counts.size))
    assert tv < 0.02
    assert sample_N(1.0, 0.5, 0.0, stream()) == 1


def test_single_replicate_conserves_fragmented_load(pure_fragmentation, stream):
    run = simulate_population(pure_fragmentation, 1.0, 2.0, None, stream(), snapshot_times=[0.0, 1.0], dt=1e-2)
    assert [s.time for s in run.snapshots] == pytest.approx([0.0, 1.0, 2.0])
    assert list(run.snapshots[0].living) == [CellLabel()]
    final = run.final()
    assert final.labels_consistent()
    assert sum(c.x for c in final.living.values()) == pytest.approx(1.0)
    n_div = sum(1 for e in run.events if e.kind == "division")
    assert final.size == 1 + n_div


def test_high_death_goes_extinct(pure_fragmentation, stream):
    run = simulate_population(pure_fragmentation.with_(d=5.0), 1.0, 3.0, None, stream(), dt=1e-2)
    assert run.final().extinct
    assert run.final().size == 0


def test_varying_lysis_needs_curve(full_death, stream):
    with pytest.raises(PopulationError):
        simulate_population(full_death, 1.0, 1.0, None, stream())


def test_mean_cell_count(pure_fragmentation, stream):
    sample = sample_population(pure_fragmentation.with_(d=0.5), 1.0, None, [2.0], [], 4000, stream(), dt=1e-2)
    n = sample.n_cells[0]
    assert sample.replicates == 4000 and sample.capped == 0
    se = n.std(ddof=1) / math.sqrt(n.size)
    assert abs(n.mean() - math.e) < 4 * se


def test_cap_flags_replicates(stream, caplog):
    model = preset_model("supercritical")
    with caplog.at_level(logging.WARNING):
        sample = sample_population(model, 1.0, None, [4.0], ["1"], 1000, stream(), dt=1e-2, max_cells=8)
    assert sample.capped > 0
    assert np.isnan(sample.n_cells[0]).sum() == sample.capped
    assert "cap" in caplog.text


def _tv_to_law(draws, b, d, t):
    counts = np.bincount(draws)
    pmf = np.array([birth_death_pmf(b, d, t, n) for n in range(counts.size)])
    # mass of the exact law beyond the largest draw counts fully
    return 0.5 * (np.abs(counts / draws.size - pmf).sum() + (1.0 - pmf.sum()))


def test_population_cell_count_law(pure_fragmentation, stream):
    sample = sample_population(pure_fragmentation.with_(d=0.5), 1.0, None, [1.0], [], 20000, stream("law"),
                               dt=1e-2)
    assert sample.capped == 0
    assert _tv_to_law(sample.n_cells[0].astype(np.int64), 1.0, 0.5, 1.0) < 0.02
    assert _tv_to_law(sample_N(1.0, 0.5, 1.0, stream("exact"), size=20000), 1.0, 0.5, 1.0) < 0.02


@pytest.mark.parametrize("F", ["1", "ge:0.3", "ge:0.7"])
def test_many_to_one_pure_fragmentation(pure_fragmentation, stream, F):
    res = many_to_one_check(F, 1.0, pure_fragmentation.with_(d=0.5), 1.0, None, 10000, 10000, stream(F),
                            dt=1e-2)
    assert abs(res.z) < 3
    assert res.functional == ("one" if F == "1" else F)


@pytest.fixture(scope="module")
def full_death_curve():
    model = preset_model("full-death")
    return solve_mean_field(model, 1.0, 1.0, np.linspace(0.0, 1.0, 21), 1e-3, 10, 4000,
                            DriverStream(12345, "full-death/mean-field", 0), dt=1e-2)


@pytest.mark.slow
@pytest.mark.parametrize("F", ["1", "ge:0.3", "ge:0.7"])
def test_many_to_one_full_death(full_death, full_death_curve, stream, F):
    assert full_death_curve.converged
    res = many_to_one_check(F, 1.0, full_death, 1.0, full_death_curve, 10000, 10000, stream(F), dt=1e-2)
    assert abs(res.z) < 3


def test_many_to_one_rejects_identity_on_superlinear(pure_fragmentation, stream):
    model = pure_fragmentation.with_(g=FunctionSpec("power", (1.0, 2.0), ROLE_G))
    with pytest.raises(PopulationError):
        many_to_one_check("identity", 1.0, model, 1.0, None, 100, 100, stream())


def test_trend_test():
    down = trend_test([(0.5, 0.01), (0.4, 0.01), (0.3, 0.01)], "decreasing", 0.01)
    assert down.monotone and down.significant
    up = trend_test([(0.3, 0.01), (0.5, 0.01)], "decreasing", 0.01)
    assert not up.monotone and not up.significant
    assert trend_test([(0.3, 0.01), (0.5, 0.01)], "increasing", 0.01).significant
    with pytest.raises(PopulationError):
        trend_test([(0.3, 0.01)])
    with pytest.raises(PopulationError):
        trend_test([(0.3, 0.01), (0.2, 0.01)], "sideways")


def test_survival_fraction_stats(stream):
    model = preset_model("subcritical")
    st = survival_fraction_stats(model, 1.0, None, 1.0, [0.5, 2.0, 10.0], 1000, stream(),
                                 indicators=("ge", "finite"), dt=1e-2)
    ge = [st.estimate("ge", K)[0] for K in (0.5, 2.0, 10.0)]
    assert ge[0] >= ge[1] >= ge[2]
    assert st.estimate("finite", 0.0)[0] == pytest.approx(st.survival[1.0][0])
    env = st.envelope("ge", 0.5, 10.0)
    assert env.bound == pytest.approx(env.C / math.sqrt(10.0))
    rows = list(st.rows())
    assert len(rows) == 4 and all(r[-1] == 1000 for r in rows)
    with pytest.raises(PopulationError):
        survival_fraction_stats(model, 1.0, None, 1.0, [1.0], 999, stream())
    with pytest.raises(PopulationError):
        survival_fraction_stats(model, 1.0, None, 1.0, [1.0], 1000, stream(), indicators=("median",))
