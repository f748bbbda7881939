import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgts import autodiff as ad
from bgts.metrics import (ContractError, MetricReport, crps_by_integration, crps_discrete,
                          crps_loss, crps_terms, mase, pairwise_term_naive, pinball,
                          pit_histogram, pit_values, quantile_losses, residual_correlation,
                          score_forecast, wape)
from bgts.model import bin_centers


# --- CRPS --------------------------------------------------------------------


def test_crps_examples():
    assert crps_discrete([1.0], [2.0], 5.0) == 0.0  # y clamps to the single bin
    t1, t2 = crps_terms(np.array([1.0]), np.array([2.0]), np.array(5.0))
    assert t1 - t2 == 3.0
    assert crps_by_integration([1.0], [2.0], 5.0) == pytest.approx(3.0, abs=1e-12)
    assert crps_discrete([0.5, 0.5], [0.0, 1.0], 0.0) == pytest.approx(0.25, abs=1e-15)


def test_crps_matches_integration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(2, 40))
        h = np.sort(rng.uniform(-5, 5, K))
        p = rng.dirichlet(np.ones(K))
        y = float(rng.uniform(h[0], h[-1]))
        assert abs(crps_discrete(p, h, y) - crps_by_integration(p, h, y)) < 1e-6


@pytest.mark.parametrize("K", [2, 17, 500, 5000])
def test_linear_term2_equals_pairwise(K):
    rng = np.random.default_rng(K)
    h = bin_centers(K)
    p = rng.dirichlet(np.full(K, 0.5))
    _, t2 = crps_terms(p, h, np.array(0.0))
    assert abs(float(t2) - pairwise_term_naive(p, h)) < 1e-10


def test_crps_contract():
    with pytest.raises(ContractError):
        crps_discrete([0.5, 0.4], [0.0, 1.0], 0.0)
    with pytest.raises(ContractError):
        crps_discrete([0.5, 0.5], [1.0, 0.0], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000), st.floats(-12, 12))
def test_crps_nonnegative(K, seed, y):
    p = np.random.default_rng(seed).dirichlet(np.ones(K))
    assert crps_discrete(p, bin_centers(K), y) >= -1e-12


def test_crps_zero_only_for_point_mass_at_y():
    h = bin_centers(7)
    p = np.zeros(7)
    p[3] = 1.0
    assert crps_discrete(p, h, h[3]) == 0.0
    assert crps_discrete(p, h, h[3] + 0.1) > 0
    p[2], p[3] = 0.01, 0.99
    assert crps_discrete(p, h, h[3]) > 0


def test_crps_proper_on_small_grid():
    # expected score under Q is minimized at p = Q over a grid of candidate p
    h = np.array([-1.0, 0.0, 1.0])
    Q = np.array([0.2, 0.5, 0.3])

    def expected(p):
        return sum(Q[j] * crps_discrete(p, h, h[j]) for j in range(3))

    best = expected(Q)
    grid = np.linspace(0, 1, 41)
    for a in grid:
        for b in grid:
            if a + b <= 1:
                assert expected(np.array([a, b, 1 - a - b])) >= best - 1e-12


def test_crps_loss_gradient():
    rng = np.random.default_rng(3)
    h = bin_centers(9)
    logits = rng.standard_normal((2, 3, 9))
    y = rng.uniform(-9, 9, (2, 3))

    def f(x):
        return float(ad.reduce_sum(crps_loss(ad.softmax(ad.Tensor(x)), h, y)).data)

    leaf = ad.leaf(logits)
    got = ad.backward(ad.reduce_sum(crps_loss(ad.softmax(leaf), h, y)), [leaf])[leaf]
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        e = np.zeros_like(logits)
        e[idx] = 1e-6
        num[idx] = (f(logits + e) - f(logits - e)) / 2e-6
    assert np.linalg.norm(got - num) / np.linalg.norm(num) < 1e-6


# --- point and quantile metrics ------------------------------------------------


def test_mase_examples():
    assert mase([3.0], [4.0], [1.0, 2.0, 3.0], 1) == 1.0
    assert mase([1.0, 2.0], [1.0, 2.0], [0.0, 1.0, 3.0]) == 0.0
    # seasonal naive on a series whose in-sample and out-of-sample seasonal errors match
    y = np.array([0.0, 2.0, 1.0, 3.0, 2.0, 4.0])
    assert mase(y[4:], y[2:4], y[:4], m=2) == pytest.approx(1.0)
    assert math.isnan(mase([1.0], [1.0], [5.0, 5.0, 5.0]))


def test_wape_examples():
    assert wape([2.0, 2.0], [1.0, 3.0]) == 0.5
    assert wape([2.0, 2.0], [2.0, 2.0]) == 0.0
    assert wape([2.0, -3.0], [0.0, 0.0]) == 1.0
    assert math.isnan(wape([0.0], [1.0]))


def test_quantile_loss_examples():
    assert pinball(2.0, 1.0, 0.5) == 0.5
    y = np.array([1.0, 2.0, 3.0])
    levels = (0.1, 0.5, 0.9)
    sql, wql = quantile_losses(y, np.tile(y[:, None], (1, 3)), levels, history=[0.0, 1.0, 3.0])
    assert sql == 0.0 and wql == 0.0
    _, wql = quantile_losses([4.0], [[2.0]], (0.5,))
    assert wql == 0.5


def test_sql_scaling():
    y = np.array([2.0, 4.0])
    q = np.array([[1.0], [5.0]])
    sql, _ = quantile_losses(y, q, (0.5,), history=[0.0, 2.0, 4.0])
    # mean pinball 0.5, seasonal error 2 -> 2 * 0.5 / 2
    assert sql == pytest.approx(0.5)


# --- PIT and correlation -------------------------------------------------------


def test_pit_ideal_forecaster_uniform():
    rng = np.random.default_rng(0)
    K = 50
    h = bin_centers(K)
    width = h[1] - h[0]
    n = 10_000
    p = rng.dirichlet(np.ones(K), size=n)
    # sample from the forecaster's own piecewise-uniform density
    cells = np.array([rng.choice(K, p=row) for row in p])
    y = h[cells] + rng.uniform(-0.5, 0.5, n) * width
    freqs = pit_histogram(pit_values(p, h, y))
    assert np.abs(freqs - 0.1).max() < 0.03
    assert abs(freqs.sum() - 1) < 1e-12


def test_pit_point_forecast_below_observations():
    h = bin_centers(10)
    p = np.zeros((5, 10))
    p[:, 0] = 1.0
    freqs = pit_histogram(pit_values(p, h, np.full(5, 9.0)))
    np.testing.assert_array_equal(freqs, [0] * 9 + [1])


def test_residual_correlation():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(100)
    assert residual_correlation(a, a) == pytest.approx(1.0)
    assert residual_correlation(a, -a) == pytest.approx(-1.0)
    b, c = rng.standard_normal((2, 10_000))
    assert abs(residual_correlation(b, c)) < 0.05
    assert math.isnan(residual_correlation(np.ones(5), a[:5]))
    with pytest.raises(ContractError):
        residual_correlation([1.0], [1.0])


# --- report --------------------------------------------------------------------


def test_report_macro_skips_undefined(tmp_path):
    r = MetricReport()
    r.add("a", {"MASE": 1.0, "WAPE": 0.5, "SQL": 2.0, "WQL": math.nan, "CRPS": 0.1})
    r.add("b", {"MASE": 3.0, "WAPE": 0.5, "SQL": 4.0, "WQL": 0.2, "CRPS": 0.3})
    macro, undefined = r.macro()
    assert macro["MASE"] == 2.0 and macro["WQL"] == 0.2 and undefined["WQL"] == 1
    r.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "item_id,metric,value" and len(lines) == 11
    r.write_json(tmp_path / "m.json")


def test_score_forecast_has_all_metrics():
    h = bin_centers(21)
    p = np.full((3, 21), 1 / 21)
    out = score_forecast(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 2.0]),
                         np.tile(np.arange(9.0)[None] / 4, (3, 1)), np.arange(10.0),
                         p, h, (2.0, 1.0))
    assert set(out) == {"MASE", "WAPE", "SQL", "WQL", "CRPS"}
    assert all(np.isfinite(list(out.values())))
