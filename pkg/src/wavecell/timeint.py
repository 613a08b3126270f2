"""Time integration of the semi-discrete system M psi'' + K psi = f(t) F_s.

Three schemes:

* ``newmark_run``: the implicit Newmark-beta family (trapezoidal rule for
  beta = 1/4, gamma = 1/2).  The iteration matrix S = M + beta dt^2 K is
  factorized once.
* ``cdm_run``: the central difference method in two-step displacement
  form, bootstrapped with a Taylor step.  Only M is factorized.
* ``imex_run``: splits the DOFs into an explicitly integrated set ``d``
  (mass rows exactly diagonal, away from cut elements) and an implicitly
  integrated set ``c``.  The d-part advances with the central difference
  method, the c-part with the trapezoidal rule using the already updated
  d values; stability is then governed by the explicit subsystem alone.

All runs share the force model F(t) = f_t(t) * F_s, record observer
samples at every step when an observer matrix is given, and abort with
``DivergenceError`` when the solution leaves a generous amplitude bound.
Wall-clock time is accumulated separately for factorization, right hand
side evaluation, and solve/update work.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .linalg import dt_crit as _dt_crit
from .linalg import factorize, is_structurally_diagonal

DIVERGENCE_LIMIT = 1.0e12


class DivergenceError(RuntimeError):
    """The solution amplitude exploded (unstable time step)."""

    def __init__(self, step: int, amplitude: float):
        super().__init__(
            f"solution diverged at step {step}: max |psi| = {amplitude:.3e}")
        self.step = step
        self.amplitude = amplitude


@dataclass
class StageTimings:
    """Accumulated wall-clock seconds per solver stage."""

    factorization: float = 0.0
    rhs: float = 0.0
    backward_insertion: float = 0.0

    @property
    def total(self) -> float:
        return self.factorization + self.rhs + self.backward_insertion


@dataclass
class RunResult:
    method: str
    dt: float
    t: np.ndarray                 # (n_t + 1,) step times
    obs: np.ndarray | None        # (n_obs, n_t + 1) observer samples
    psi: np.ndarray               # final displacement
    psi_dot: np.ndarray | None    # final velocity (None for pure CDM)
    timings: StageTimings
    fact_dim: int = 0             # dimension of the factored iteration matrix


def select_dt(dt_c: float, dt_max: float | None = None,
              safety: float = 0.9) -> float:
    """Working step: safety factor times the critical step, capped."""
    dt = safety * dt_c
    if dt_max is not None:
        dt = min(dt, dt_max)
    return dt


def imex_critical_time_step(K, M, d_idx, tol: float = 1e-9,
                            seed: int = 0) -> float:
    """Critical step of the explicitly integrated (d) subsystem."""
    d_idx = np.asarray(d_idx)
    if d_idx.shape[0] == 0:
        raise ValueError("explicit subsystem is empty")
    K_dd = K[d_idx][:, d_idx]
    M_dd = M[d_idx][:, d_idx]
    return _dt_crit(K_dd, M_dd, tol=tol, seed=seed)


def _check(psi, step):
    amp = float(np.max(np.abs(psi))) if psi.size else 0.0
    if not np.isfinite(amp) or amp > DIVERGENCE_LIMIT:
        raise DivergenceError(step, amp)


class _Recorder:
    def __init__(self, obs_mat, n_dof, n_t, dt):
        self.obs_mat = obs_mat
        self.t = np.arange(n_t + 1) * dt
        self.obs = (np.empty((obs_mat.shape[0], n_t + 1))
                    if obs_mat is not None else None)

    def record(self, k, psi):
        if self.obs is not None:
            self.obs[:, k] = self.obs_mat @ psi


def newmark_run(M, K, F_s, f_t, dt: float, n_t: int, obs_mat=None,
                beta: float = 0.25, gamma: float = 0.5,
                psi0=None, v0=None, s_factory=None) -> RunResult:
    """Newmark-beta scheme; beta = 0 recovers the central difference method.

    ``s_factory``, when given, is a zero-argument callable returning a
    factorization of S = M + beta dt^2 K (anything with ``solve``); it lets
    separable grids use a fast-diagonalization inverse, and K then only
    needs to support matrix-vector products.
    """
    n = M.shape[0]
    psi = np.zeros(n) if psi0 is None else np.array(psi0, dtype=float)
    v = np.zeros(n) if v0 is None else np.array(v0, dtype=float)
    timings = StageTimings()
    rec = _Recorder(obs_mat, n, n_t, dt)

    t0 = time.perf_counter()
    if s_factory is not None:
        S_fact = s_factory()
        M_fact = factorize(M)
    elif beta != 0.0:
        S_fact = factorize((M + (beta * dt * dt) * K).tocsr())
        M_fact = factorize(M)
    else:
        S_fact = factorize(M)
        M_fact = S_fact
    timings.factorization += time.perf_counter() - t0

    a = M_fact.solve(f_t(0.0) * F_s - K @ psi)
    rec.record(0, psi)

    for k in range(n_t):
        t_new = (k + 1) * dt
        psi_pred = psi + dt * v + (0.5 * dt * dt * (1.0 - 2.0 * beta)) * a
        v_pred = v + (dt * (1.0 - gamma)) * a
        t0 = time.perf_counter()
        rhs = f_t(t_new) * F_s - K @ psi_pred
        timings.rhs += time.perf_counter() - t0
        t0 = time.perf_counter()
        a = S_fact.solve(rhs)
        psi = psi_pred + (beta * dt * dt) * a
        v = v_pred + (gamma * dt) * a
        timings.backward_insertion += time.perf_counter() - t0
        rec.record(k + 1, psi)
        _check(psi, k + 1)
    return RunResult(method="newmark", dt=dt, t=rec.t, obs=rec.obs,
                     psi=psi, psi_dot=v, timings=timings,
                     fact_dim=getattr(S_fact, "n", n))


def cdm_run(M, K, F_s, f_t, dt: float, n_t: int, obs_mat=None,
            psi0=None, v0=None) -> RunResult:
    """Central difference method in two-step displacement form."""
    n = M.shape[0]
    psi = np.zeros(n) if psi0 is None else np.array(psi0, dtype=float)
    v = np.zeros(n) if v0 is None else np.array(v0, dtype=float)
    timings = StageTimings()
    rec = _Recorder(obs_mat, n, n_t, dt)

    t0 = time.perf_counter()
    M_fact = factorize(M)
    # A diagonal mass makes the solve trivial; there is no factorization
    # stage to report then.
    if M_fact.kind != "diagonal":
        timings.factorization += time.perf_counter() - t0

    a = M_fact.solve(f_t(0.0) * F_s - K @ psi)
    psi_prev = psi - dt * v + (0.5 * dt * dt) * a
    rec.record(0, psi)

    for k in range(n_t):
        t_k = k * dt
        t0 = time.perf_counter()
        rhs = f_t(t_k) * F_s - K @ psi
        timings.rhs += time.perf_counter() - t0
        t0 = time.perf_counter()
        psi_new = 2.0 * psi - psi_prev + (dt * dt) * M_fact.solve(rhs)
        psi_prev = psi
        psi = psi_new
        timings.backward_insertion += time.perf_counter() - t0
        rec.record(k + 1, psi)
        _check(psi, k + 1)
    return RunResult(method="cdm", dt=dt, t=rec.t, obs=rec.obs,
                     psi=psi, psi_dot=None, timings=timings,
                     fact_dim=0 if M_fact.kind == "diagonal" else M_fact.n)


def imex_run(M, K, F_s, f_t, dt: float, n_t: int, c_idx, d_idx,
             obs_mat=None, beta: float = 0.25, gamma: float = 0.5,
             psi0=None, v0=None) -> RunResult:
    """Implicit-explicit split integration.

    The d-part steps with the central difference method using the full
    state at t_k; the c-part then steps with the Newmark scheme against
    the already updated d values at t_{k+1}.  Requires the d mass rows to
    be exactly diagonal (no coupling into c).  Degenerates to ``cdm_run``
    when c is empty and to ``newmark_run`` when d is empty.
    """
    n = M.shape[0]
    c_idx = np.asarray(c_idx, dtype=np.int64)
    d_idx = np.asarray(d_idx, dtype=np.int64)
    if c_idx.shape[0] + d_idx.shape[0] != n:
        raise ValueError("c and d index sets must partition the DOFs")
    psi = np.zeros(n) if psi0 is None else np.array(psi0, dtype=float)
    v = np.zeros(n) if v0 is None else np.array(v0, dtype=float)
    timings = StageTimings()
    rec = _Recorder(obs_mat, n, n_t, dt)
    M = M.tocsr()
    K = K.tocsr()

    has_d = d_idx.shape[0] > 0
    has_c = c_idx.shape[0] > 0

    t0 = time.perf_counter()
    if has_d:
        M_drows = M[d_idx]
        if M_drows[:, c_idx].nnz != 0:
            raise ValueError("d mass rows couple into the implicit set; "
                             "the basis/lumping choice does not support the "
                             "implicit-explicit split")
        M_dd = M_drows[:, d_idx]
        if not is_structurally_diagonal(M_dd):
            raise ValueError("d mass block is not diagonal; the basis/lumping "
                             "choice does not support the implicit-explicit "
                             "split")
        m_d = M_dd.diagonal()
        if np.any(m_d <= 0.0):
            raise ValueError("d mass block has non-positive diagonal entries")
        K_d = K[d_idx]
    if has_c:
        M_crows = M[c_idx]
        M_cc = M_crows[:, c_idx]
        K_c = K[c_idx]
        K_cc = K_c[:, c_idx]
        S_fact = factorize((M_cc + (beta * dt * dt) * K_cc).tocsr())
        M_cc_fact = factorize(M_cc)
    timings.factorization += time.perf_counter() - t0

    # Initial accelerations, blockwise (the mass has no d-c coupling).
    r0 = f_t(0.0) * F_s - K @ psi
    a_c = M_cc_fact.solve(r0[c_idx]) if has_c else None
    if has_d:
        a_d = r0[d_idx] / m_d
        psi_prev_d = psi[d_idx] - dt * v[d_idx] + (0.5 * dt * dt) * a_d
    if has_c:
        psi_c = psi[c_idx].copy()
        v_c = v[c_idx].copy()
    rec.record(0, psi)

    for k in range(n_t):
        t_k = k * dt
        t_new = t_k + dt
        if has_d:
            t0 = time.perf_counter()
            rhs_d = f_t(t_k) * F_s[d_idx] - K_d @ psi
            timings.rhs += time.perf_counter() - t0
            t0 = time.perf_counter()
            psi_d_new = 2.0 * psi[d_idx] - psi_prev_d + (dt * dt) * (rhs_d / m_d)
            psi_prev_d = psi[d_idx].copy()
            psi[d_idx] = psi_d_new
            timings.backward_insertion += time.perf_counter() - t0
        if has_c:
            psi_c_pred = psi_c + dt * v_c + (0.5 * dt * dt * (1.0 - 2.0 * beta)) * a_c
            v_pred = v_c + (dt * (1.0 - gamma)) * a_c
            psi[c_idx] = psi_c_pred
            t0 = time.perf_counter()
            rhs_c = f_t(t_new) * F_s[c_idx] - K_c @ psi
            timings.rhs += time.perf_counter() - t0
            t0 = time.perf_counter()
            a_c = S_fact.solve(rhs_c)
            psi_c = psi_c_pred + (beta * dt * dt) * a_c
            v_c = v_pred + (gamma * dt) * a_c
            psi[c_idx] = psi_c
            timings.backward_insertion += time.perf_counter() - t0
        rec.record(k + 1, psi)
        _check(psi, k + 1)

    v_out = None
    if has_c and not has_d:
        v_out = np.zeros(n)
        v_out[c_idx] = v_c
    return RunResult(method="imex", dt=dt, t=rec.t, obs=rec.obs,
                     psi=psi, psi_dot=v_out, timings=timings,
                     fact_dim=c_idx.shape[0])


def sample_history(result: RunResult, times) -> np.ndarray:
    """Observer history linearly interpolated onto the given times."""
    if result.obs is None:
        raise ValueError("run was made without an observer matrix")
    times = np.asarray(times, dtype=float)
    out = np.empty((result.obs.shape[0], times.shape[0]))
    for i in range(result.obs.shape[0]):
        out[i] = np.interp(times, result.t, result.obs[i])
    return out
