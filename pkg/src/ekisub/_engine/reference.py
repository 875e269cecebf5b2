"""Reference numpy implementation of the EKI run loop.

This is the ground truth the compiled kernel is tested against. One loop
iteration records the six projected norms and the eigenvalue snapshot for
the current state, then applies the particle update.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from ..errors import SolveFailure

QUANTITIES = ("P_theta", "Q_theta", "N_theta", "P_omega", "Q_omega", "N_omega")


def _col_norms(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->j", X, X))


def step_once(V, H, sigma_entries, y, eps=None):
    """One EKI particle update; eps=None gives the deterministic variant."""
    J = V.shape[1]
    m = V.mean(axis=1)
    Vc = V - m[:, None]
    B = H @ Vc
    C = (B @ B.T) / (J - 1)
    try:
        F = sla.cho_factor(C + sigma_entries, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"innovation covariance factorization failed: {exc}") from None
    innov = y[:, None] - H @ V
    if eps is not None:
        innov = innov + eps
    T = sla.cho_solve(F, innov)
    X = (Vc @ B.T) / (J - 1)
    return V + X @ T


def run_loop(V0, H, sigma_entries, y, vstar, p_obs, q_obs, n_obs, p_st, q_st, n_st,
             w1r, max_iters, stop_tol, noise):
    """Run EKI for up to max_iters steps with per-iteration trace recording.

    noise is an (max_iters, n, J) block for the stochastic variant or None
    for the deterministic one. Returns (V_final, norms dict keyed by
    QUANTITIES with (records, J) arrays, eigen snapshots (records, r),
    records). Recording happens before each step, so records = steps + 1.
    """
    V = np.array(V0, dtype=float)
    d, J = V.shape
    r = w1r.shape[1]
    cap = max_iters + 1
    norms = {name: np.empty((cap, J)) for name in QUANTITIES}
    eig = np.empty((cap, r))
    records = 0
    for i in range(cap):
        theta = H @ V - y[:, None]
        omega = V - vstar[:, None]
        pt = _col_norms(p_obs @ theta)
        norms["P_theta"][i] = pt
        norms["Q_theta"][i] = _col_norms(q_obs @ theta)
        norms["N_theta"][i] = _col_norms(n_obs @ theta)
        norms["P_omega"][i] = _col_norms(p_st @ omega)
        norms["Q_omega"][i] = _col_norms(q_st @ omega)
        norms["N_omega"][i] = _col_norms(n_st @ omega)
        if r:
            thetac = theta - theta.mean(axis=1, keepdims=True)
            A = w1r.T @ thetac
            eig[i] = np.einsum("ij,ij->i", A, A) / (J - 1)
        records = i + 1
        if i == max_iters:
            break
        if stop_tol > 0.0 and pt.max() < stop_tol:
            break
        m = V.mean(axis=1)
        Vc = V - m[:, None]
        B = H @ Vc
        C = (B @ B.T) / (J - 1)
        try:
            F = sla.cho_factor(C + sigma_entries, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SolveFailure(f"innovation covariance factorization failed: {exc}") from None
        innov = -theta if noise is None else noise[i] - theta
        T = sla.cho_solve(F, innov)
        X = (Vc @ B.T) / (J - 1)
        V = V + X @ T
    out_norms = {name: arr[:records].copy() for name, arr in norms.items()}
    return V, out_norms, eig[:records].copy(), records
