import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hmcvi.data import conjugate_log_marginal
from hmcvi.estimators import (
    EstimateFailure, IsConfig, IsEstimate, estimate_nll, log_mean_exp, write_nll_csv,
)
from hmcvi.models import HmcviModels, ModelSpec


def exact_conjugate(n_hmc=0):
    """Conjugate model whose encoder is the exact posterior N(x/2, 1/2)."""
    m = HmcviModels(ModelSpec(data_dim=1, latent_dim=1, hidden=(), generative="conjugate", n_hmc=n_hmc))
    p = m.init_params(np.random.default_rng(0))
    p["encoder.W0"] = np.array([[0.5, 0.0]])
    p["encoder.b0"] = np.array([0.0, math.log(0.5)])
    return m, p


def test_constant_weights_have_zero_error():
    est, se = log_mean_exp(np.full(100, -3.2))
    assert est == pytest.approx(-3.2, abs=1e-14) and se == 0.0


def test_log_mean_exp_matches_direct():
    lw = np.random.default_rng(0).normal(size=50)
    est, se = log_mean_exp(lw)
    w = np.exp(lw)
    assert est == pytest.approx(math.log(w.mean()), abs=1e-13)
    assert se == pytest.approx(w.std(ddof=1) / (math.sqrt(50) * w.mean()), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=2, max_size=40), st.floats(-500, 500))
def test_shift_invariance_and_bounds(lw, c):
    lw = np.array(lw)
    est, se = log_mean_exp(lw)
    est2, se2 = log_mean_exp(lw + c)
    assert est2 == pytest.approx(est + c, abs=1e-9 * (1 + abs(est) + abs(c)))
    assert se2 == pytest.approx(se, rel=1e-9, abs=1e-12)
    assert lw.min() - 1e-9 <= est <= lw.max() + 1e-9


def test_all_minus_inf_fails():
    with pytest.raises(EstimateFailure):
        log_mean_exp(np.full(5, -np.inf))
    _, se = log_mean_exp(np.array([0.0, -np.inf]))
    assert np.isfinite(se)


def test_conjugate_estimate_close_to_exact():
    m, p = exact_conjugate(n_hmc=2)
    x = np.random.default_rng(1).normal(scale=math.sqrt(2), size=(20, 1))
    est = estimate_nll(m, p, x, np.random.default_rng(2), IsConfig(5000, 5))
    exact = conjugate_log_marginal(x)
    assert abs(est.mean - exact.mean()) < 0.02
    assert np.all(np.abs(est.log_px - exact) < 4 * est.stderr + 1e-3)


def test_sample_size_consistency():
    m, p = exact_conjugate()
    p["encoder.b0"] = np.array([0.3, 0.0])  # a mediocre encoder, so the weights vary
    x = np.array([[0.7], [-1.5], [2.2]])
    a = estimate_nll(m, p, x, np.random.default_rng(3), IsConfig(2500, 5))
    b = estimate_nll(m, p, x, np.random.default_rng(4), IsConfig(5000, 5))
    assert np.all(a.stderr > 0)
    assert np.all(np.abs(a.log_px - b.log_px) <= 3 * np.hypot(a.stderr, b.stderr))


def test_mnist_sized_model_gives_finite_estimates():
    m = HmcviModels(ModelSpec(n_hmc=1, hidden=(20,)))
    rng = np.random.default_rng(5)
    p = m.init_params(rng, std=0.1)
    x = (rng.random((3, 784)) < 0.2).astype(float)
    est = estimate_nll(m, p, x, rng, IsConfig(200, 2))
    assert np.all(np.isfinite(est.log_px)) and np.all(est.log_px < 0)


def test_csv_output(tmp_path):
    est = IsEstimate(np.array([-1.5, -2.0]), np.array([0.1, 0.2]), 10)
    write_nll_csv(tmp_path / "nll.csv", est)
    lines = (tmp_path / "nll.csv").read_text().splitlines()
    assert lines[0] == "datum,nll,stderr,n_samples" and lines[1] == "0,1.5,0.1,10"
    assert est.mean == -1.75 and est.mean_stderr == pytest.approx(math.sqrt(0.05) / 2)
    with pytest.raises(ValueError):
        IsConfig(0)
