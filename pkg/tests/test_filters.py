import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from qndspin.ensemble import final_levels
from qndspin.filters import (
    AnalyticFilterState, DegeneratePosteriorError, GaussianFilterState, analytic_density_matrix,
    analytic_expectation, analytic_moment, current_average, estimator_error_va, integral_coefficients,
    integral_estimator, preparation_time, short_time_mean_step, short_time_variance,
)
from qndspin.hilbert import SimParams, coherent_state, dicke_state, levels
from qndspin.sde_engine import noise_matrix, simulate_batch

X10 = coherent_state(10, math.pi / 2)
PRIOR10 = np.abs(X10) ** 2


def test_moment_at_t0_is_prior_moment():
    f = AnalyticFilterState(X10, 0.0, 0.0)
    m = levels(10)
    for k in range(5):
        assert analytic_moment(f, k) == pytest.approx(np.sum(m**k * PRIOR10))


def test_single_level_prior_cannot_move():
    c = dicke_state(10, 3)
    for t, Y in ((0.5, -2.0), (3.0, 40.0)):
        f = AnalyticFilterState(c, t, Y)
        assert analytic_moment(f, 1) / analytic_moment(f, 0) == pytest.approx(3)
        assert analytic_expectation(np.abs(c) ** 2, t, Y, 1.0, 1.0) == pytest.approx(3)


def test_log_space_survives_large_exponents():
    # a record that points at m=5 for t=50 gives weights near e^-1000
    got = analytic_expectation(PRIOR10, 50.0, 250.0, 1.0, 1.0)
    assert got == pytest.approx(5)


def test_density_matrix_examples():
    f = AnalyticFilterState(dicke_state(6, 1), 2.0, 1.3)
    rho = analytic_density_matrix(f)
    np.testing.assert_allclose(rho, np.outer(dicke_state(6, 1), dicke_state(6, 1)), atol=1e-14)

    # eta = 0: coherences decay as exp[-M (m - m')^2 t / 2], independent of Y
    t, M = 0.7, 1.3
    rho0 = np.outer(X10, X10.conj())
    m = levels(10)
    for Y in (0.0, 5.0):
        got = analytic_density_matrix(AnalyticFilterState(X10, t, Y, M=M, eta=0.0))
        want = rho0 * np.exp(-M * (m[:, None] - m[None, :]) ** 2 * t / 2)
        np.testing.assert_allclose(got, want, atol=1e-14)

    f = AnalyticFilterState(X10, 1.2, 0.4, eta=0.6)
    np.testing.assert_allclose(np.diagonal(analytic_density_matrix(f)).real,
                               _weights(f), rtol=1e-12)


def _weights(f):
    p = np.abs(f.c) ** 2 * np.exp(-2 * f.M * f.eta * levels(f.N) ** 2 * f.t + 4 * f.M * f.eta * levels(f.N) * f.Y)
    return p / p.sum()


def test_density_matrix_phases():
    c = coherent_state(4, 1.0, 0.8)
    rho = analytic_density_matrix(AnalyticFilterState(c, 0.0, 0.0))
    np.testing.assert_allclose(rho, np.outer(c, c.conj()), atol=1e-14)


def test_degenerate_posterior():
    with pytest.raises(DegeneratePosteriorError):
        analytic_moment(AnalyticFilterState(np.zeros(3), 1.0, 0.0), 1)
    with pytest.raises(ValueError):
        AnalyticFilterState(X10, -1.0, 0.0)
    with pytest.raises(ValueError):
        analytic_moment(AnalyticFilterState(X10, 1.0, 0.0), -1)


def test_short_time_variance_examples():
    assert short_time_variance(0.0, 2.5, 1, 1) == 2.5
    assert short_time_variance(1.0, 2.5, 1, 1) == pytest.approx(2.5 / 11)
    ts = np.linspace(0, 1e4, 50)
    v = short_time_variance(ts, 2.5, 1, 1)
    assert np.all(np.diff(v) < 0) and v[-1] > 0 and v[-1] < 1e-4
    with pytest.raises(ValueError):
        short_time_variance(1.0, 0.0, 1, 1)


def test_short_time_mean_step_examples():
    p = SimParams()
    assert short_time_mean_step(1.5, 2.0, 0.0, 0.3, 1e-3, 0.0, p) == 1.5
    assert short_time_mean_step(1.5, 0.0, 0.0, 0.3, 1e-3, 0.7, p) == 1.5
    # positive field turns an x-polarized state towards -z
    assert short_time_mean_step(0.0, 2.5, 1.0, 0.0, 1e-3, 0.0, p) < 0


def test_gaussian_filter_state_update():
    p = SimParams()
    g = GaussianFilterState(0.0, 2.5)
    g.update(0.01, 0.0, p.dt, p)
    assert g.t == pytest.approx(p.dt)
    assert g.var == pytest.approx(short_time_variance(p.dt, 2.5, 1, 1))
    assert g.mean > 0
    assert g.A(1, 1, 5) == pytest.approx(0.2 + 2 * p.dt)


def test_short_time_filter_tracks_full_filter_large_N():
    params = SimParams(N=100, T=0.1)
    res = simulate_batch(params, np.arange(40), estimator="short_time")
    assert np.all(np.abs(res.jz_est - res.jz) < 3 * np.sqrt(res.var))


def test_integral_estimator_examples():
    assert integral_estimator(0.7, 0.0, 5) == pytest.approx(0, abs=1e-14)
    assert integral_estimator(3.0, 1.2, 1e6) == pytest.approx(0.4)
    # direct quadrature of m exp(-A m^2 + 2 B m) on [-J, J]
    A, B, J = 0.4, 1.1, 5
    x = np.linspace(-J, J, 200001)
    w = np.exp(-A * x**2 + 2 * B * x)
    assert integral_estimator(A, B, J) == pytest.approx(trapezoid(x * w, x) / trapezoid(w, x), rel=1e-8)
    with pytest.raises(ValueError):
        integral_estimator(0.0, 1.0, 5)


def test_integral_estimator_matches_short_time_closed_form():
    # without truncation both reduce to 2 M eta Y / (1/J + 2 M eta t); compare where
    # the truncated Gaussian keeps all but 1e-3 of its mass inside [-J, J]
    params = SimParams()
    res = simulate_batch(params, np.arange(40), estimator="integral")
    A, B = integral_coefficients(res.t, res.y_int, 1.0, 1.0, params.J)
    loc, scale = B / A, np.sqrt(0.5 / A)
    outside = stats.norm.cdf((-params.J - loc) / scale) + stats.norm.sf((params.J - loc) / scale)
    inside = outside < 1e-3
    assert inside.mean() > 0.95
    assert np.max(np.abs(res.jz_est - loc)[inside]) < 1e-2


def test_streaming_short_time_filter_matches_closed_form():
    params = SimParams()
    res = simulate_batch(params, np.arange(20), estimator="short_time")
    closed = 2 * res.y_int / (1 / params.J + 2 * res.t)
    assert np.max(np.abs(res.jz_est - closed)) < 0.05


def test_current_average():
    t = 2.5
    assert current_average(1.3 * t, t) == pytest.approx(1.3)
    with pytest.raises(ZeroDivisionError):
        current_average(0.0, 0.0)


def test_current_average_resolves_levels():
    res = simulate_batch(SimParams(), np.arange(200), estimator="average")
    agree = final_levels(res.jz_est[:, -1], 10) == final_levels(res.jz[:, -1], 10)
    assert agree.mean() >= 0.95


def test_estimator_error_va():
    assert estimator_error_va(1, 1, 5) == pytest.approx(0.05)
    assert estimator_error_va(1, 0, 5) == math.inf
    assert estimator_error_va(1, 0.5, 4) == pytest.approx(estimator_error_va(1, 0.5, 2) / 2)
    with pytest.raises(ValueError):
        estimator_error_va(1, 1, 0)


def test_preparation_time():
    assert preparation_time(0.01, 2.5, 1, 1) == pytest.approx(24.9)
    assert preparation_time(2.5, 2.5, 1, 1) == 0
    assert preparation_time(0.01, 5.0, 1, 1) > preparation_time(0.01, 2.5, 1, 1)
    with pytest.raises(ValueError):
        preparation_time(0.0, 2.5, 1, 1)


def test_filter_deviation_shrinks_with_dt():
    # integrator error against the exact filter on one set of Brownian paths
    fine_dt, B = 1.25e-4, 20
    fine = noise_matrix(3, np.arange(B), 8000, fine_dt)
    rms = {}
    for dt in (2e-3, 5e-4):
        agg = int(round(dt / fine_dt))
        n = int(round(1 / dt))
        noise = fine[: n * agg].reshape(n, agg, B).sum(axis=1)
        params = SimParams(T=1.0, dt=dt, record_every=1)
        res = simulate_batch(params, np.arange(B), noise=noise, representation="sme")
        exact = analytic_expectation(PRIOR10, res.t[None, :], res.y_int, 1.0, 1.0)
        rms[dt] = np.sqrt(np.mean((exact - res.jz) ** 2))
    assert rms[5e-4] < rms[2e-3] / 2.5
