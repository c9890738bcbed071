import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcal.conformal import build_interval
from gridcal.metrics import (
    CSV_COLUMNS,
    ence,
    evaluate,
    mpiw,
    mse,
    spearman_per_cell,
    spearman_rho,
    write_reports,
)

from oracles import ence_loop, mse_loop, spearman_bruteforce


def test_mse_simple():
    assert mse([1.0, 3.0], [0.0, 0.0]) == 5.0
    assert mse([1.0, 3.0], [0.0, 0.0], mask=[False, True]) == 9.0
    with pytest.raises(ValueError):
        mse([1.0], [0.0], mask=[False])


def test_ence_zero_when_sigma_equals_residual():
    rng = np.random.default_rng(0)
    pred = rng.normal(size=50)
    truth = rng.normal(size=50)
    assert ence(np.abs(pred - truth), pred, truth) == pytest.approx(0.0, abs=1e-12)


def test_ence_constant_case():
    assert ence(np.full(4, 2.0), np.ones(4), np.zeros(4)) == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_ence_and_mse_match_loops(seed):
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0, 3, size=(6, 7))
    pred, truth = rng.normal(size=(2, 6, 7))
    assert ence(sigma, pred, truth) == pytest.approx(ence_loop(sigma, pred, truth), rel=1e-12)
    assert mse(pred, truth) == pytest.approx(mse_loop(pred, truth), rel=1e-12)


def test_spearman_monotone():
    x = np.arange(10.0)
    assert spearman_rho(x, x**3) == 1.0
    assert spearman_rho(x, -x) == -1.0


def test_spearman_degenerate_is_nan():
    assert math.isnan(spearman_rho(np.ones(5), np.arange(5.0)))
    with pytest.raises(ValueError):
        spearman_rho([1.0], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_spearman_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=20)
    b = rng.integers(0, 5, size=20).astype(float)  # ties on one side
    assert spearman_rho(a, b) == pytest.approx(spearman_bruteforce(a, b), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=30))
def test_spearman_bounds_and_oracle(pairs):
    a, b = (np.array(v, dtype=float) for v in zip(*pairs))
    rho = spearman_rho(a, b)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        assert math.isnan(rho)
    else:
        assert -1.0 <= rho <= 1.0
        assert rho == pytest.approx(spearman_bruteforce(a, b), abs=1e-12)


def test_spearman_per_cell_matches_flat():
    rng = np.random.default_rng(1)
    e = rng.uniform(size=(15, 2, 3))
    u = rng.uniform(size=(15, 2, 3))
    rho = spearman_per_cell(e, u)
    for i in range(2):
        for j in range(3):
            assert rho[i, j] == pytest.approx(spearman_rho(e[:, i, j], u[:, i, j]), abs=1e-12)
    masked = spearman_per_cell(e, u, mask=np.array([[True, False, True], [False, False, True]]))
    assert np.isnan(masked[0, 1]) and not np.isnan(masked[0, 0])


def test_mpiw():
    iv = build_interval(np.zeros(4), np.array([1.0, 2.0, 3.0, 4.0]), 1.0)
    assert mpiw(iv) == 5.0
    assert mpiw(iv, mask=[True, False, False, False]) == 2.0


def _stack(seed=0, t=12):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0, 100, size=(t, 3, 3, 8))
    mu = truth + rng.normal(0, 5, size=truth.shape)
    sigma = np.abs(rng.normal(5, 1, size=truth.shape))
    return mu, sigma, truth


def test_evaluate_report_fields(tmp_path):
    mu, sigma, truth = _stack()
    iv = build_interval(mu, sigma, 1.5)
    mask = np.zeros((3, 3, 8), dtype=bool)
    mask[0] = True
    rep = evaluate(mu, sigma, truth, iv, mask, dataset="synthetic", method="tta")
    full = np.broadcast_to(mask, mu.shape)
    assert rep.masked and rep.n_cells == 24
    assert rep.mse == pytest.approx(mse(mu, truth, full))
    assert rep.mpiw == pytest.approx(3.0 * sigma[full].mean())
    rho = spearman_per_cell(np.abs(mu - truth), sigma, mask)
    assert rep.spearman == pytest.approx(np.nanmean(rho))
    assert -1 <= rep.spearman <= 1 and rep.ence >= 0
    write_reports([rep, evaluate(mu, sigma, truth, iv)], tmp_path / "r.csv")
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    assert list(rows[0]) == CSV_COLUMNS and len(rows) == 2
    assert rows[1]["masked"] == "False"


def test_constant_baseline_has_zero_spread():
    mu, _, truth = _stack(1)
    sigma = np.broadcast_to(np.full((3, 3, 8), 4.0), mu.shape)
    rep = evaluate(mu, sigma, truth, build_interval(mu, sigma, 1.0))
    assert rep.sigma_spread == 0.0 and rep.mean_sigma == 4.0
    assert math.isnan(rep.spearman)
