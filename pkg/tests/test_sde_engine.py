import math

import numpy as np
import pytest

from qndspin.control import ControllerSpec
from qndspin.ensemble import simulate_unconditional, unconditional_moments
from qndspin.hilbert import SimParams, coherent_state, dicke_state, expect, spin_operators
from qndspin.sde_engine import (
    NoiseStream, StepSizeError, noise_matrix, photocurrent_increment, recorded_steps, simulate_batch,
    simulate_trajectory, sme_increment, sse_drift_diffusion, step_euler_maruyama, step_predictor_corrector,
)

P = SimParams()
X10 = coherent_state(10, math.pi / 2)


def dm(psi):
    return np.outer(psi, psi.conj())


def test_sse_drift_diffusion_examples():
    for m in (-5, 0, 3):
        drift, diff = sse_drift_diffusion(dicke_state(10, m), 0.0, P)
        assert np.abs(drift).max() == 0 and np.abs(diff).max() == 0
    _, diff = sse_drift_diffusion(X10, 0.0, P)
    assert np.vdot(diff, diff).real == pytest.approx(2.5)
    psi = dicke_state(10, 2)
    drift, _ = sse_drift_diffusion(psi, 0.8, P)
    np.testing.assert_allclose(drift, -1j * P.gamma * 0.8 * spin_operators(10).jy @ psi, atol=1e-14)
    assert np.abs(drift).max() > 0


def test_sme_increment_steady_state():
    rho = dm(dicke_state(10, -2))
    for dW in (0.0, 0.05, -0.3):
        np.testing.assert_allclose(sme_increment(rho, 0.0, dW, P), rho, atol=1e-15)


def test_sme_eta0_coherence_decay():
    params = SimParams(eta=0.0, dt=1e-4)
    rho = dm(X10)
    jx = spin_operators(10).jx
    for _ in range(10_000):
        rho = sme_increment(rho, 0.0, 0.0, params)
    assert expect(jx, rho) == pytest.approx(5 * math.exp(-0.5), rel=1e-3)


def test_sme_step_equals_sse_outer_product():
    psi = coherent_state(10, 1.2)
    errs = []
    for dt in (1e-3, 1e-4):
        params = SimParams(dt=dt)
        dW = 0.7 * math.sqrt(dt)
        psi1 = step_predictor_corrector(psi, 0.3, dW, params)
        rho1 = step_predictor_corrector(dm(psi), 0.3, dW, params)
        errs.append(np.abs(rho1 - dm(psi1)).max())
    assert errs[0] < 1e-4
    # the local discrepancy is the one-step strong error, O(dt^1.5)
    assert errs[1] < errs[0] / 20


def test_photocurrent_increment_examples():
    assert photocurrent_increment(X10, 0.0, P) == pytest.approx(0, abs=1e-15)
    psi = dicke_state(10, 2)
    assert photocurrent_increment(psi, 0.01, P) == pytest.approx(0.007)
    with pytest.raises(ValueError):
        photocurrent_increment(psi, 0.01, P.replace(eta=0.0))


def test_photocurrent_mean_is_jz():
    psi = coherent_state(10, 1.0)
    stream = NoiseStream(5, 0)
    ys = np.array([photocurrent_increment(psi, w, P) for w in stream.increments(20_000, P.dt)]) / P.dt
    se = ys.std() / math.sqrt(len(ys))
    assert abs(ys.mean() - expect(spin_operators(10).jz, psi)) < 3 * se


def test_dicke_state_is_a_fixed_point():
    for state in (dicke_state(10, 1), dm(dicke_state(10, -4))):
        out = step_predictor_corrector(state, 0.0, 0.05, P)
        np.testing.assert_allclose(out, state, atol=1e-15)


def test_drift_only_step_is_second_order():
    errs = []
    for dt in (1e-2, 1e-3):
        t, got = simulate_unconditional(math.pi / 2, 10, 1.0, 1.0, dt, record_every=1)
        want = unconditional_moments(math.pi / 2, 10, 1.0, t)
        errs.append(np.abs(got["jx"] - want["jx"]).max())
    assert errs[1] < errs[0] / 50


def test_weak_agreement_with_fine_euler_maruyama():
    # E[<dJ_z^2>(1)] with the default scheme vs Euler-Maruyama at dt/10 on the same Brownian paths
    B = 2000
    fine = noise_matrix(11, np.arange(B), 10_000, 1e-4)
    em = simulate_batch(SimParams(T=1.0, dt=1e-4, scheme="euler", record_every=10_000), np.arange(B), noise=fine)
    coarse = fine.reshape(1000, 10, B).sum(axis=1)
    pc = simulate_batch(SimParams(T=1.0, dt=1e-3, record_every=1000), np.arange(B), noise=coarse)
    se = em.var[:, -1].std() / math.sqrt(B)
    assert abs(pc.var[:, -1].mean() - em.var[:, -1].mean()) < 2 * se


def test_single_euler_step():
    psi = coherent_state(6, 0.9)
    params = SimParams(N=6)
    drift, diff = sse_drift_diffusion(psi, 0.4, params)
    want = psi + drift * params.dt + diff * 0.02
    np.testing.assert_allclose(step_euler_maruyama(psi, 0.4, 0.02, params), want / np.linalg.norm(want),
                               atol=1e-14)


def test_open_loop_final_variance_small():
    rec = simulate_trajectory(P)
    assert rec.var[-1] <= 0.25
    assert rec.t[-1] == pytest.approx(5.0)
    np.testing.assert_allclose(rec.populations.sum(axis=1), 1, atol=1e-12)


def test_eta0_trajectory_matches_unconditional_moments():
    params = SimParams(eta=0.0, T=2.0)
    rec = simulate_trajectory(params)
    want = unconditional_moments(params.theta, 10, 1.0, rec.t)
    np.testing.assert_allclose(rec.jx, want["jx"], rtol=1e-6)
    np.testing.assert_allclose(rec.var, want["var_z"], rtol=1e-9)
    assert np.all(np.isnan(rec.y_int))


def test_same_seed_same_record():
    a = simulate_trajectory(P.replace(controller="law2"), noise=NoiseStream(4, 9))
    b = simulate_trajectory(P.replace(controller="law2"), noise=NoiseStream(4, 9))
    for name in ("jz", "var", "jx", "b", "y_int", "final_state"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = simulate_trajectory(P.replace(controller="law2"), noise=NoiseStream(4, 10))
    assert not np.array_equal(a.jz, c.jz)


def test_innovation_reconstructed_bit_exact():
    params = SimParams(T=1.0, eta=0.7)
    rec = simulate_trajectory(params)
    ph = rec.photocurrent
    c = 2 * math.sqrt(params.M * params.eta)
    assert np.array_equal(ph.innovations, c * (ph.increments - ph.predicted_jz * params.dt))
    assert ph.integral[-1] == rec.y_int[-1]


@pytest.mark.parametrize("controller", ["none", "law1", "law2"])
def test_replaying_the_record_reproduces_the_run(controller):
    params = SimParams(T=1.0, controller=controller)
    rec = simulate_trajectory(params, noise=NoiseStream(2, 3))
    replay = simulate_trajectory(params, photocurrent=rec.photocurrent.increments)
    assert np.array_equal(replay.jz, rec.jz)
    assert np.array_equal(replay.final_state, rec.final_state)


def test_noise_streams():
    a = NoiseStream(1, 0).increments(100, 0.01)
    assert np.array_equal(a, NoiseStream(1, 0).increments(100, 0.01))
    assert not np.array_equal(a, NoiseStream(1, 1).increments(100, 0.01))
    assert not np.array_equal(a, NoiseStream(2, 0).increments(100, 0.01))
    mat = noise_matrix(1, [3, 0], 100, 0.01)
    assert np.array_equal(mat[:, 1], a)
    big = NoiseStream(0, 0).increments(100_000, 0.01)
    assert big.var() == pytest.approx(0.01, rel=0.02)


def test_batch_matches_single_runs():
    params = SimParams(T=1.0, controller="law1")
    batch = simulate_batch(params, np.arange(4))
    for i in range(4):
        one = simulate_batch(params, [i])
        np.testing.assert_allclose(one.jz[0], batch.jz[i], atol=1e-12)


def test_sse_and_sme_agree_in_distribution():
    params = SimParams(T=1.0)
    sse = simulate_batch(params, np.arange(300), representation="sse")
    sme = simulate_batch(params, np.arange(300, 600), representation="sme")
    for name in ("var", "jz"):
        a, b = getattr(sse, name)[:, -1], getattr(sme, name)[:, -1]
        se = math.hypot(a.std(), b.std()) / math.sqrt(300)
        assert abs(a.mean() - b.mean()) < 3 * se


def test_sme_handles_partial_efficiency():
    params = SimParams(T=1.0, eta=0.5)
    res = simulate_batch(params, np.arange(20), keep_populations=True)
    assert np.all(res.populations > -1e-8)
    # less information: slower average collapse than eta = 1
    full = simulate_batch(SimParams(T=1.0), np.arange(20))
    assert res.var[:, -1].mean() > full.var[:, -1].mean()


def test_step_size_error_is_raised():
    with pytest.raises(StepSizeError) as info:
        simulate_batch(SimParams(N=40, dt=0.5, T=1.0), [0, 1])
    assert info.value.step is not None


def test_estimators_need_full_state_for_law1():
    with pytest.raises(ValueError):
        simulate_batch(SimParams(T=0.1, controller="law1"), [0], estimator="average")


@pytest.mark.parametrize("estimator", ["analytic", "short_time", "integral", "average"])
def test_law2_with_reduced_estimators_runs(estimator):
    res = simulate_batch(SimParams(T=1.0, controller="law2"), np.arange(4), estimator=estimator)
    assert np.all(np.isfinite(res.b))
    assert np.all(np.abs(res.b) <= P.b_max)


def test_recorded_steps_include_the_end():
    steps = recorded_steps(SimParams(T=0.0105, dt=1e-3, record_every=4))
    assert steps[0] == 0 and steps[-1] == 10 and list(steps) == [0, 4, 8, 10]


def test_law2_rotation_uses_field():
    params = SimParams(T=0.2, controller="law2")
    rec = simulate_trajectory(params, ControllerSpec.from_params(params))
    np.testing.assert_allclose(rec.b, np.clip(10 * rec.jz, -1e3, 1e3), atol=1e-9)
