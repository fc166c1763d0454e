import math

import numpy as np
import pytest

from ssep_tree_lib.graphical import RngStream
from ssep_tree_lib.observables import LocalFunction, XiRecord, occupation_function
from ssep_tree_lib.oracle import sigma_occupation_exact
from ssep_tree_lib.statistics import (
    EstimateCI,
    RatePoint,
    cesaro_trend,
    clt_test,
    duality_grid,
    duality_integrals,
    estimate_sigma_carre_du_champ,
    estimate_sigma_duality,
    estimate_sigma_empirical,
    legendre_rate,
    rate_functional_dual,
    rate_functional_I,
    rate_theoretical,
    render_estimates_csv,
    render_rates_csv,
    required_cutoff,
    scaled_cumulant,
    summarize,
    tail_rate,
)
from ssep_tree_lib.tree import VertexAddr, build_ball


def records(values, t=1.0):
    return [XiRecord(t=t, xi=float(x), path_id=i, seed="") for i, x in enumerate(values)]


def test_estimate_ci():
    a = EstimateCI(1.0, 0.1, 100, "empirical")
    b = EstimateCI(1.2, 0.1, 100, "duality")
    assert a.agrees_with(b)
    assert not a.agrees_with(b, k=1.0)
    assert a.to_row(t=5.0) == {"value": 1.0, "std_error": 0.1, "reps": 100, "method": "empirical", "t": 5.0}
    with pytest.raises(ValueError):
        EstimateCI(1.0, -0.1, 10, "empirical")


def test_estimate_sigma_empirical():
    x = np.random.default_rng(0).normal(0.0, 1.0, 2000)
    estimate = estimate_sigma_empirical(records(x, t=2.0))
    assert estimate.method == "empirical"
    assert estimate.reps == 2000
    assert 0 < estimate.std_error < 0.05
    assert abs(estimate.value - 0.5) < 5 * estimate.std_error
    # the jackknife of the sample variance is close to its delta-method error
    assert estimate.std_error == pytest.approx(math.sqrt(2 / 2000) * 0.5, rel=0.3)

    assert estimate_sigma_empirical(records([0.5] * 40)) == EstimateCI(0.0, 0.0, 40, "empirical")
    with pytest.raises(ValueError):
        estimate_sigma_empirical(records(x[:10]))
    with pytest.raises(ValueError):
        estimate_sigma_empirical(records(x[:30]) + records(x[:30], t=2.0))
    with pytest.raises(ValueError):
        estimate_sigma_empirical(records(x[:40], t=0.0))


def test_required_cutoff_and_grid():
    F = occupation_function(VertexAddr.root(2), 0.5)
    U = required_cutoff(F, 1e-3)
    rate = (math.sqrt(2) - 1) ** 2
    assert 2 * 0.25 / rate * math.exp(-U * rate) == pytest.approx(1e-3)
    assert required_cutoff(F, 1e-2) < U
    assert required_cutoff(F, 100.0) == 0.0
    with pytest.raises(ValueError):
        required_cutoff(F, 0.0)

    grid = duality_grid(10.0)
    assert grid[0] == 0.0
    assert grid[-1] == pytest.approx(10.0)
    assert np.all(np.diff(grid) > 0)
    assert np.any(np.isclose(grid, 2.0))
    short = duality_grid(1.0)
    assert short[-1] == 1.0
    assert len(short) == 21
    with pytest.raises(ValueError):
        duality_grid(0.0)


def test_sigma_duality_occupation():
    p = 0.5
    F = occupation_function(VertexAddr.root(3), p)
    U = required_cutoff(F, 1e-3)
    estimate = estimate_sigma_duality(F, p, U, None, 400, RngStream(41))
    assert estimate.method == "duality"
    assert estimate.reps == 400
    assert abs(estimate.value - sigma_occupation_exact(3, p)) < 4 * estimate.std_error + 0.01

    again = duality_integrals(F, p, U, None, 3, RngStream(41), start=2)
    first = duality_integrals(F, p, U, None, 5, RngStream(41))
    assert np.allclose(again, first[2:])


def test_sigma_duality_rejects_bad_input():
    root = VertexAddr.root(2)
    F = occupation_function(root, 0.5)
    with pytest.raises(ValueError):
        estimate_sigma_duality(F, 0.3, 50.0, None, 10, RngStream(1))
    with pytest.raises(ValueError):
        estimate_sigma_duality(F, 0.5, 1.0, None, 10, RngStream(1))
    with pytest.raises(ValueError):
        estimate_sigma_duality(F, 0.5, 50.0, None, 1, RngStream(1))
    zero = LocalFunction([root], [0.0, 0.0])
    assert estimate_sigma_duality(zero, 0.5, 1.0, None, 5, RngStream(1)).value == 0.0


def test_sigma_carre_du_champ():
    ball = build_ball(2, 2)
    F = occupation_function(VertexAddr.root(2), 0.5)
    estimate = estimate_sigma_carre_du_champ(ball, F, 0.5, 0.5, 200, RngStream(2))
    assert estimate.method == "carre_du_champ"
    assert estimate.value > 0
    assert estimate.std_error > 0


def test_summarize():
    estimate = summarize([1.0, 2.0, 3.0], "duality")
    assert estimate.value == 2.0
    assert estimate.std_error == pytest.approx(1 / math.sqrt(3))
    with pytest.raises(ValueError):
        summarize([1.0], "duality")


def test_clt_test():
    statistic, pvalue = clt_test([0.0], 1.0)
    assert statistic == pytest.approx(0.5)
    assert 0 <= pvalue <= 1

    x = np.random.default_rng(1).normal(0.0, 2.0, 1000)
    statistic, pvalue = clt_test(x * math.sqrt(4.0), 2.0, t=4.0)
    assert statistic < 0.06
    assert pvalue > 1e-3

    assert clt_test([0.0, 0.0], 0.0) == (0.0, 1.0)
    with pytest.raises(ValueError):
        clt_test([0.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        clt_test([], 1.0)


def test_rates():
    assert rate_theoretical(1.0, 1 / 3) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        rate_theoretical(1.0, 0.0)

    samples = np.array([0.0] * 90 + [2.0] * 10)
    points = tail_rate(samples, 4.0, 2.0, [0.5, 1.0, 2.0], 1.0)
    # u = 2 needs ξ >= 4, which no sample reaches
    assert [point.u for point in points] == [0.5, 1.0]
    point = points[0]
    assert point.tail_count == 10
    assert point.empirical == pytest.approx(4.0 / 4.0 * math.log(0.1))
    assert point.theoretical == pytest.approx(0.125)
    assert point.gap == pytest.approx(abs(point.empirical + point.theoretical))

    csv = render_rates_csv([(4.0, 2.0, p) for p in points]).splitlines()
    assert csv[0] == "# ssep-tree rates v1"
    assert csv[1] == "t,a_t,u,empirical,theoretical,tail_count,gap"
    assert len(csv) == 4
    assert render_rates_csv([]).splitlines()[1] == "t,a_t,u,empirical,theoretical,tail_count,gap"


def test_cumulant_and_legendre():
    assert scaled_cumulant(np.zeros(50), 4.0, 2.0, [-1.0, 1.0]).tolist() == pytest.approx([0.0, 0.0])
    x = np.array([-1.0, 1.0])
    expected = 1.0 * (math.log(math.cosh(0.5)))
    assert scaled_cumulant(x, 1.0, 1.0, [0.5])[0] == pytest.approx(expected)

    c = np.array([-1.0, 0.0, 1.0])
    assert legendre_rate(1.0, c, c**2 / 2) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        legendre_rate(1.0, c, [0.0])


def test_rate_functionals():
    T, n = 1.0, 100
    s = np.linspace(0.0, T, n + 1)
    u = 0.8
    f = u * s
    assert rate_functional_I(f, T, 1.0) == pytest.approx(u**2 / 2)
    assert rate_functional_I(f, T, 2.0) == pytest.approx(u**2 / 8)

    # the dual form is maximized by g = f'/σ², where it meets I
    sigma = 1.5
    assert rate_functional_dual(f, np.full_like(s, u / sigma**2), T, sigma) == pytest.approx(
        rate_functional_I(f, T, sigma)
    )
    curved = np.sin(3 * s)
    best = rate_functional_I(curved, T, sigma)
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = rng.normal(0.0, 1.0, n + 1)
        assert rate_functional_dual(curved, g, T, sigma) <= best + 1e-12

    with pytest.raises(ValueError):
        rate_functional_I([1.0, 2.0], T, 1.0)
    with pytest.raises(ValueError):
        rate_functional_dual(f, s[:-1], T, 1.0)


def test_cesaro_trend_and_estimates_csv():
    estimates = [EstimateCI(v, 0.01, 10, "empirical") for v in (1.0, 0.5, 0.5)]
    assert cesaro_trend(estimates) == [-0.5, 0.0]
    assert math.isnan(cesaro_trend([EstimateCI(0.0, 0.0, 10, "x"), estimates[0]])[0])

    csv = render_estimates_csv([e.to_row(t=1.0) for e in estimates]).splitlines()
    assert csv[0] == "# ssep-tree estimates v1"
    assert csv[1] == "value,std_error,reps,method,t"
    assert isinstance(RatePoint(1.0, -1.0, 1.0, 3, 0.0).gap, float)
