import numpy as np
import pytest
import scipy.sparse as sp

from wavecell.timeint import (
    DIVERGENCE_LIMIT,
    DivergenceError,
    RunResult,
    cdm_run,
    imex_critical_time_step,
    imex_run,
    newmark_run,
    sample_history,
    select_dt,
)


def scalar_system(omega):
    M = sp.csr_matrix(np.array([[1.0]]))
    K = sp.csr_matrix(np.array([[omega * omega]]))
    return M, K, np.zeros(1), sp.identity(1, format="csr")


def bar_system():
    """3-element linear bar with lumped mass, free ends."""
    h = 1.0 / 3.0
    M = sp.diags([h / 2.0, h, h, h / 2.0]).tocsr()
    K1 = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    K = np.zeros((4, 4))
    for e in range(3):
        K[e:e + 2, e:e + 2] += K1
    return M, sp.csr_matrix(K)


def zero_f(t):
    return 0.0


def test_all_integrators_conserve_zero():
    M, K = bar_system()
    F = np.zeros(4)
    obs = sp.identity(4, format="csr")
    runs = [
        cdm_run(M, K, F, zero_f, 1e-2, 50, obs_mat=obs),
        newmark_run(M, K, F, zero_f, 1e-2, 50, obs_mat=obs),
        imex_run(M, K, F, zero_f, 1e-2, 50, np.array([1, 2]),
                 np.array([0, 3]), obs_mat=obs),
    ]
    for r in runs:
        assert np.all(r.psi == 0.0)
        assert np.all(r.obs == 0.0)
        assert r.t.shape == (51,)
        assert r.t[-1] == pytest.approx(0.5)


def test_newmark_unconditionally_stable_far_beyond_cfl():
    omega = 100.0
    M, K, F, obs = scalar_system(omega)
    dt = 10.0 / omega  # fifty times the explicit limit
    r = newmark_run(M, K, F, zero_f, dt, 1000, obs_mat=obs, psi0=[1.0])
    assert np.abs(r.obs).max() <= 1.0 + 1e-9


def test_cdm_stability_dichotomy():
    M, K, F, obs = scalar_system(1.0)  # dt_crit = 2
    r = cdm_run(M, K, F, zero_f, 1.99, 10000, obs_mat=obs, psi0=[1.0])
    assert np.abs(r.obs).max() <= 50.0
    with pytest.raises(DivergenceError) as exc:
        cdm_run(M, K, F, zero_f, 2.01, 10000, obs_mat=obs, psi0=[1.0])
    assert exc.value.step > 0
    assert exc.value.amplitude > DIVERGENCE_LIMIT


@pytest.mark.parametrize("runner", [cdm_run, newmark_run])
def test_second_order_convergence_scalar(runner):
    # cos(omega t) free oscillation, errors sampled at shared times
    omega, T = 5.0, 2.0
    M, K, F, obs = scalar_system(omega)
    errs = []
    for n_t in (100, 200):
        dt = T / n_t
        r = runner(M, K, F, zero_f, dt, n_t, obs_mat=obs, psi0=[1.0])
        stride = n_t // 100
        got = r.obs[0, ::stride]
        exact = np.cos(omega * r.t[::stride])
        errs.append(np.linalg.norm(got - exact))
    assert 3.6 <= errs[0] / errs[1] <= 4.4


def test_cdm_equals_newmark_beta_zero():
    rng = np.random.default_rng(6)
    n = 10
    M = sp.diags(rng.uniform(0.5, 2.0, n)).tocsr()
    A = rng.standard_normal((n, n))
    K = sp.csr_matrix(A @ A.T + n * np.eye(n))
    F = rng.standard_normal(n)
    psi0 = rng.standard_normal(n)
    obs = sp.identity(n, format="csr")
    from wavecell.linalg import dt_crit
    dt = 0.5 * dt_crit(K, M)
    f = lambda t: np.sin(3.0 * t)
    r_cdm = cdm_run(M, K, F, f, dt, 200, obs_mat=obs, psi0=psi0)
    r_nm = newmark_run(M, K, F, f, dt, 200, obs_mat=obs, psi0=psi0,
                       beta=0.0, gamma=0.5)
    scale = np.abs(r_cdm.obs).max()
    assert np.abs(r_cdm.obs - r_nm.obs).max() <= 1e-10 * scale


def test_imex_empty_c_equals_cdm():
    M, K = bar_system()
    F = np.array([0.0, 1.0, 0.5, 0.2])
    obs = sp.identity(4, format="csr")
    f = lambda t: np.sin(6.0 * t)
    dt, n_t = 5e-3, 200
    r_imex = imex_run(M, K, F, f, dt, n_t, np.array([], dtype=int),
                      np.arange(4), obs_mat=obs)
    r_cdm = cdm_run(M, K, F, f, dt, n_t, obs_mat=obs)
    assert np.abs(r_imex.obs - r_cdm.obs).max() <= 1e-12
    assert r_imex.fact_dim == 0


def test_imex_empty_d_equals_newmark():
    M, K = bar_system()
    # dense SPD mass so the implicit branch is nontrivial
    M = sp.csr_matrix(M.toarray() + 0.05 * np.ones((4, 4)))
    F = np.array([0.0, 1.0, 0.5, 0.2])
    obs = sp.identity(4, format="csr")
    f = lambda t: np.sin(6.0 * t)
    dt, n_t = 5e-3, 200
    r_imex = imex_run(M, K, F, f, dt, n_t, np.arange(4),
                      np.array([], dtype=int), obs_mat=obs)
    r_nm = newmark_run(M, K, F, f, dt, n_t, obs_mat=obs)
    scale = np.abs(r_nm.obs).max()
    assert np.abs(r_imex.obs - r_nm.obs).max() <= 1e-12 * max(scale, 1.0)
    assert r_imex.fact_dim == 4


def test_imex_second_order_on_split_bar():
    M, K = bar_system()
    F = np.array([0.0, 1.0, 0.5, 0.2])
    obs = sp.identity(4, format="csr")
    f = lambda t: np.sin(6.0 * t)
    T = 1.0
    c_idx, d_idx = np.array([1, 2]), np.array([0, 3])
    ref = newmark_run(M, K, F, f, T / 25600, 25600, obs_mat=obs)
    errs = []
    for n_t in (50, 100, 200):
        r = imex_run(M, K, F, f, T / n_t, n_t, c_idx, d_idx, obs_mat=obs)
        stride = n_t // 50
        ref_stride = 25600 // 50
        d = r.obs[:, ::stride] - ref.obs[:, ::ref_stride]
        errs.append(np.linalg.norm(d))
    assert 3.0 <= errs[0] / errs[1] <= 5.0
    assert 3.0 <= errs[1] / errs[2] <= 5.0


def test_imex_rejects_bad_partitions():
    M, K = bar_system()
    F = np.zeros(4)
    with pytest.raises(ValueError, match="partition"):
        imex_run(M, K, F, zero_f, 1e-3, 3, np.array([1]), np.array([0, 3]))
    # consistent mass couples d rows into c
    M_cons = sp.csr_matrix(np.array(
        [[2.0, 1.0, 0.0, 0.0],
         [1.0, 4.0, 1.0, 0.0],
         [0.0, 1.0, 4.0, 1.0],
         [0.0, 0.0, 1.0, 2.0]]) / 18.0)
    with pytest.raises(ValueError, match="couple"):
        imex_run(M_cons, K, F, zero_f, 1e-3, 3, np.array([1, 2]),
                 np.array([0, 3]))
    # d block itself not diagonal
    with pytest.raises(ValueError, match="not diagonal"):
        imex_run(M_cons, K, F, zero_f, 1e-3, 3, np.array([], dtype=int),
                 np.arange(4))


def test_imex_critical_time_step_matches_subsystem():
    M, K = bar_system()
    d_idx = np.array([0, 3])
    got = imex_critical_time_step(K, M, d_idx, tol=1e-12)
    # K_dd and M_dd are diagonal here, so the value is analytic
    lam = (K[0, 0] / M[0, 0])
    assert got == pytest.approx(2.0 / np.sqrt(lam), rel=1e-9)
    with pytest.raises(ValueError):
        imex_critical_time_step(K, M, np.array([], dtype=int))


def test_linearity_of_runs():
    M, K = bar_system()
    F = np.array([0.2, -0.4, 1.0, 0.3])
    obs = sp.identity(4, format="csr")
    f = lambda t: np.cos(2.0 * t)
    psi0 = np.array([0.1, 0.0, -0.2, 0.05])
    v0 = np.array([0.0, 0.3, 0.1, -0.1])
    for runner in (cdm_run, newmark_run):
        r_f = runner(M, K, F, f, 1e-2, 100, obs_mat=obs)
        r_h = runner(M, K, np.zeros(4), zero_f, 1e-2, 100, obs_mat=obs,
                     psi0=psi0, v0=v0)
        r_both = runner(M, K, F, f, 1e-2, 100, obs_mat=obs, psi0=psi0, v0=v0)
        scale = np.abs(r_both.obs).max()
        assert np.abs(r_f.obs + r_h.obs - r_both.obs).max() <= 1e-12 * scale


def test_select_dt_rules():
    assert select_dt(4.17564e-3, 6.8966e-3) == pytest.approx(3.758076e-3,
                                                             rel=1e-9)
    assert select_dt(1.0) == pytest.approx(0.9)
    assert select_dt(1.0, 0.5) == 0.5
    assert select_dt(1.0, None, safety=0.5) == pytest.approx(0.5)


def test_sample_history_interpolates():
    M, K = bar_system()
    F = np.array([0.0, 1.0, 0.0, 0.0])
    obs = sp.identity(4, format="csr")
    f = lambda t: np.sin(4.0 * t)
    r = cdm_run(M, K, F, f, 0.1, 10, obs_mat=obs)
    times = np.array([0.05, 0.55, 1.0])
    out = sample_history(r, times)
    assert out.shape == (4, 3)
    for i in range(4):
        assert np.allclose(out[i], np.interp(times, r.t, r.obs[i]),
                           atol=1e-15)
    r_blind = cdm_run(M, K, F, f, 0.1, 10)
    with pytest.raises(ValueError):
        sample_history(r_blind, times)


def test_timings_and_fact_dims_reported():
    M, K = bar_system()
    F = np.array([0.0, 1.0, 0.5, 0.2])
    f = lambda t: np.sin(6.0 * t)
    r_cdm = cdm_run(M, K, F, f, 1e-3, 50)
    assert r_cdm.fact_dim == 0  # diagonal mass: nothing factored
    assert r_cdm.timings.factorization == 0.0
    assert r_cdm.timings.rhs > 0.0
    r_nm = newmark_run(M, K, F, f, 1e-3, 50)
    assert r_nm.fact_dim == 4
    assert r_nm.timings.factorization > 0.0
    r_imex = imex_run(M, K, F, f, 1e-3, 50, np.array([1, 2]),
                      np.array([0, 3]))
    assert r_imex.fact_dim == 2
    assert r_imex.psi_dot is None  # mixed split reports displacement only
