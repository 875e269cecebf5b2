"""Idealized stochastic iterations: noise-free covariance recursions.

Replacing the random empirical covariance with its deterministic recursion
C -> sigma - sigma (C + sigma)^-1 sigma (and the state-space analogue for G)
yields misfit/residual iterations that share the frozen i=0 eigenbasis at
every step. That makes closed forms and mean-square decay rates available,
and the empirical covariance is dominated by C in expectation, which the
Monte Carlo helpers here measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import ensemble, linops, subspaces
from .errors import DimensionMismatch, SolveFailure, ValidationError


@dataclass(frozen=True)
class IdealizedCov:
    """Observation- and state-space idealized covariances at one iteration."""

    C: np.ndarray
    G: np.ndarray
    iteration: int

    @classmethod
    def from_stats(cls, stats: ensemble.EnsembleStats) -> "IdealizedCov":
        return cls(C=stats.obs_cov.copy(), G=stats.cov.copy(), iteration=0)


@dataclass(frozen=True)
class IdealizedParticle:
    """Misfit/residual pair evolved by the idealized maps."""

    theta: np.ndarray
    omega: np.ndarray


def _state_form(obs: linops.LinearObserver) -> np.ndarray:
    Hw = sla.solve_triangular(obs.sigma.factor, obs.H, lower=True)
    return Hw.T @ Hw


def idealized_cov_step(cov: IdealizedCov, obs: linops.LinearObserver) -> IdealizedCov:
    """Advance both covariances one iteration.

    C is updated multiplicatively as C (C + sigma)^-1 sigma, which keeps the
    rounding error relative to ||C|| as C decays; G solves
    (I + G H^T sigma^-1 H) X = G. Both results are symmetrized.
    """
    S = obs.sigma.entries
    try:
        F = sla.cho_factor(cov.C + S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"C + sigma not factorizable: {exc}") from None
    Cn = cov.C @ sla.cho_solve(F, S)
    Cn = 0.5 * (Cn + Cn.T)
    A = np.eye(obs.d) + cov.G @ _state_form(obs)
    try:
        Gn = np.linalg.solve(A, cov.G)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"state covariance update failed: {exc}") from None
    Gn = 0.5 * (Gn + Gn.T)
    return IdealizedCov(C=Cn, G=Gn, iteration=cov.iteration + 1)


def idealized_misfit_step(
    p: IdealizedParticle, cov: IdealizedCov, obs: linops.LinearObserver, eps
) -> IdealizedParticle:
    """theta <- M theta + (I - M) eps with M = sigma (C + sigma)^-1."""
    eps = np.asarray(eps, dtype=float)
    S = obs.sigma.entries
    try:
        F = sla.cho_factor(cov.C + S, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"C + sigma not factorizable: {exc}") from None
    theta = eps + S @ sla.cho_solve(F, p.theta - eps)
    return IdealizedParticle(theta=theta, omega=p.omega)


def idealized_residual_step(
    p: IdealizedParticle, cov: IdealizedCov, obs: linops.LinearObserver, eps
) -> IdealizedParticle:
    """omega <- (I + G H^T sigma^-1 H)^-1 omega + G H^T (H G H^T + sigma)^-1 eps."""
    eps = np.asarray(eps, dtype=float)
    A = np.eye(obs.d) + cov.G @ _state_form(obs)
    B = obs.H @ cov.G
    try:
        Fo = sla.cho_factor(B @ obs.H.T + obs.sigma.entries, lower=True)
        omega = np.linalg.solve(A, p.omega) + B.T @ sla.cho_solve(Fo, eps)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"residual update failed: {exc}") from None
    return IdealizedParticle(theta=p.theta, omega=omega)


def idealized_particle_step(
    p: IdealizedParticle, cov: IdealizedCov, obs: linops.LinearObserver, eps
) -> IdealizedParticle:
    """Apply both maps with a single shared noise draw."""
    return idealized_residual_step(idealized_misfit_step(p, cov, obs, eps), cov, obs, eps)


def run_idealized(
    ens0: ensemble.Ensemble,
    obs: linops.LinearObserver,
    y,
    max_iters: int = 100,
    rng_seed=0,
    noise: np.ndarray | None = None,
):
    """Evolve the idealized misfit/residual pair for every particle.

    Produces a RunTrace with the same quantities and recording convention as
    ensemble.run. `noise` can pass a pregenerated (max_iters, n, J) block for
    paired comparisons against a true stochastic run; otherwise a stream is
    built from rng_seed.
    """
    from . import diagnostics

    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")
    y = np.asarray(y, dtype=float)
    if y.shape != (obs.n,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({obs.n},)")
    J = ens0.n_particles
    if noise is None:
        noise = ensemble.NoiseStream(rng_seed, obs.sigma, J).draw_block(max_iters)
    elif noise.shape != (max_iters, obs.n, J):
        raise DimensionMismatch(
            f"noise block has shape {noise.shape}, expected {(max_iters, obs.n, J)}"
        )

    stats0 = ensemble.empirical_stats(ens0, obs)
    obasis = subspaces.build_observation_basis(stats0, obs)
    sbasis = subspaces.build_state_basis(obasis, stats0, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, y)
    W1r = obasis.W[:, : obasis.r]
    Sform = _state_form(obs)
    Se = obs.sigma.entries

    theta = obs.H @ ens0.particles - y[:, None]
    omega = ens0.particles - vstar[:, None]
    C, G = stats0.obs_cov.copy(), stats0.cov.copy()
    cap = max_iters + 1
    norms = {name: np.empty((cap, J)) for name in diagnostics.QUANTITIES}
    eig = np.empty((cap, obasis.r))

    def colnorms(X):
        return np.sqrt(np.einsum("ij,ij->j", X, X))

    for i in range(cap):
        norms["P_theta"][i] = colnorms(pobs.P @ theta)
        norms["Q_theta"][i] = colnorms(pobs.Q @ theta)
        norms["N_theta"][i] = colnorms(pobs.N @ theta)
        norms["P_omega"][i] = colnorms(pst.P @ omega)
        norms["Q_omega"][i] = colnorms(pst.Q @ omega)
        norms["N_omega"][i] = colnorms(pst.N @ omega)
        if obasis.r:
            eig[i] = np.einsum("ji,jk,ki->i", W1r, C, W1r)
        if i == max_iters:
            break
        E = noise[i]
        F = sla.cho_factor(C + Se, lower=True)
        theta = E + Se @ sla.cho_solve(F, theta - E)
        B = obs.H @ G
        Fo = sla.cho_factor(B @ obs.H.T + Se, lower=True)
        omega = np.linalg.solve(np.eye(obs.d) + G @ Sform, omega) + B.T @ sla.cho_solve(Fo, E)
        Cn = C @ sla.cho_solve(F, Se)
        C = 0.5 * (Cn + Cn.T)
        Gn = np.linalg.solve(np.eye(obs.d) + G @ Sform, G)
        G = 0.5 * (Gn + Gn.T)

    trace = diagnostics.RunTrace(
        variant="idealized-stochastic",
        iterations=np.arange(cap),
        norms=norms,
        eigenvalues=eig,
    )
    final = IdealizedParticle(theta=theta, omega=omega)
    return final, trace


def closed_form_projected_misfit(
    basis: subspaces.ObservationBasis,
    sigma: linops.SpdMatrix,
    theta0: np.ndarray,
    eps_history: np.ndarray,
    iterations: int,
) -> np.ndarray:
    """Populated-space misfit after `iterations` idealized steps, in closed form.

    With c_l = 1/delta0_l, the deterministic part of each populated component
    contracts by c_l/(i + c_l) while every one of the first i noise draws
    enters with equal weight 1/(i + c_l).
    """
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    eps_history = np.asarray(eps_history, dtype=float)
    if iterations > 0 and (eps_history.ndim != 2 or eps_history.shape[0] < iterations):
        raise DimensionMismatch(
            f"need at least {iterations} noise rows, got shape {eps_history.shape}"
        )
    W1r = basis.W[:, : basis.r]
    if basis.r == 0:
        return np.zeros_like(np.asarray(theta0, dtype=float))
    c = 1.0 / basis.delta0[: basis.r]
    i = float(iterations)
    coeff_det = c / (i + c)
    term = W1r @ (coeff_det * (W1r.T @ np.asarray(theta0, dtype=float)))
    if iterations > 0:
        eps_sum = eps_history[:iterations].sum(axis=0)
        term = term + W1r @ ((W1r.T @ eps_sum) / (i + c))
    return sigma.entries @ term


@dataclass(frozen=True)
class LownerGapSummary:
    """Monte Carlo comparison of E[H Gamma_i H^T] against the idealized C_i."""

    iteration: int
    replications: int
    min_eig: float
    standard_error: float
    trace_gap: float
    trace_whitened_c: float


def lowner_gap_monte_carlo(
    problem, J: int, iteration: int, replications: int, seed: int
) -> LownerGapSummary:
    """Estimate the gap C_i - E[H Gamma_i H^T] over true stochastic runs.

    All replications start from one shared initial ensemble (so the i=0 gap
    is exactly zero) and use noise streams split from `seed` by replication
    index. min_eig is the smallest eigenvalue of the sample gap; the
    standard error is that of the per-replication gap projected onto the
    minimizing direction.
    """
    from ._engine import reference

    obs, y = problem.obs, problem.y
    if iteration < 1 or replications < 2:
        raise ValidationError("need iteration >= 1 and replications >= 2")
    if problem.ens0.n_particles == J:
        V0 = problem.ens0.particles
    else:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(997,)))
        V0 = rng.standard_normal((obs.d, J))
    stats0 = ensemble.empirical_stats(ensemble.Ensemble(V0), obs)
    cov = IdealizedCov.from_stats(stats0)
    for _ in range(iteration):
        cov = idealized_cov_step(cov, obs)
    Ci = cov.C

    gaps = np.empty((replications, obs.n, obs.n))
    for k in range(replications):
        stream = ensemble.NoiseStream(
            np.random.SeedSequence(entropy=seed, spawn_key=(k,)), obs.sigma, J
        )
        block = stream.draw_block(iteration)
        V = V0.copy()
        for i in range(iteration):
            V = reference.step_once(V, obs.H, obs.sigma.entries, y, eps=block[i])
        B = obs.H @ (V - V.mean(axis=1)[:, None])
        Ak = (B @ B.T) / (J - 1)
        gaps[k] = Ci - Ak

    D = gaps.mean(axis=0)
    D = 0.5 * (D + D.T)
    vals, vecs = np.linalg.eigh(D)
    x = vecs[:, 0]
    s = np.einsum("i,kij,j->k", x, gaps, x)
    se = float(s.std(ddof=1) / np.sqrt(replications))
    wh = sla.cho_solve((obs.sigma.factor, True), Ci)
    return LownerGapSummary(
        iteration=iteration,
        replications=replications,
        min_eig=float(vals[0]),
        standard_error=se,
        trace_gap=float(np.trace(D)),
        trace_whitened_c=float(np.trace(wh)),
    )


def replication_norm_study(problem, checkpoints, replications: int, seed: int) -> dict:
    """Mean-square projected fluctuations of the idealized iteration.

    Runs `replications` independent noise histories of the problem's whole
    ensemble (columns are replication x particle pairs, all independent) and
    records, at each checkpoint i, the pooled mean of ||P theta||^2 and
    ||P omega||^2 next to their decay bounds ||sigma|| r / i and
    ||U_1||_F^2 / i, plus the largest drift of the Q/N norms from their i=0
    values. The P norms are taken on the deviation from the noise-free
    trajectory: the decay bound governs the noise-driven part, while the
    initial condition fades at its own c/(i+c) rate per branch and can
    dominate small i when some starting eigenvalue is tiny.

    The state-side constant is the squared Frobenius norm of the populated
    state basis. Populated directions are normalized against H^T sigma^-1 H
    but may still carry components in the kernel of H, which that form does
    not see; ||U_1||_F^2 accounts for them and collapses to at most
    ||pinv(H^T sigma^-1 H)|| r when no kernel component is present.
    """
    obs, y = problem.obs, problem.y
    checkpoints = sorted(int(i) for i in checkpoints)
    if not checkpoints or checkpoints[0] < 1:
        raise ValidationError("checkpoints must be >= 1")
    if replications < 1:
        raise ValidationError("replications must be >= 1")
    stats0 = ensemble.empirical_stats(problem.ens0, obs)
    obasis = subspaces.build_observation_basis(stats0, obs)
    sbasis = subspaces.build_state_basis(obasis, stats0, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, y)
    Sform = _state_form(obs)
    Se = obs.sigma.entries
    L = obs.sigma.factor

    theta0 = obs.H @ problem.ens0.particles - y[:, None]
    omega0 = problem.ens0.particles - vstar[:, None]
    theta = np.tile(theta0, replications)
    omega = np.tile(omega0, replications)
    theta_det = theta0.copy()
    omega_det = omega0.copy()
    q_t0 = np.sqrt(np.einsum("ij,ij->j", pobs.Q @ theta, pobs.Q @ theta))
    n_t0 = np.sqrt(np.einsum("ij,ij->j", pobs.N @ theta, pobs.N @ theta))
    q_o0 = np.sqrt(np.einsum("ij,ij->j", pst.Q @ omega, pst.Q @ omega))
    n_o0 = np.sqrt(np.einsum("ij,ij->j", pst.N @ omega, pst.N @ omega))

    sig_norm = float(np.linalg.eigvalsh(Se)[-1])
    r = obasis.r
    u_fro_sq = float((sbasis.U[:, :r] ** 2).sum())

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(31,)))
    C, G = stats0.obs_cov.copy(), stats0.cov.copy()
    cols = theta.shape[1]
    out = {
        "checkpoints": checkpoints,
        "mean_sq_p_theta": [],
        "mean_sq_p_omega": [],
        "bound_p_theta": [],
        "bound_p_omega": [],
        "max_q_theta_dev": 0.0,
        "max_n_theta_dev": 0.0,
        "max_q_omega_dev": 0.0,
        "max_n_omega_dev": 0.0,
        "replications": replications,
    }
    for i in range(1, checkpoints[-1] + 1):
        E = L @ rng.standard_normal((obs.n, cols))
        F = sla.cho_factor(C + Se, lower=True)
        theta = E + Se @ sla.cho_solve(F, theta - E)
        theta_det = Se @ sla.cho_solve(F, theta_det)
        B = obs.H @ G
        Fo = sla.cho_factor(B @ obs.H.T + Se, lower=True)
        both = np.linalg.solve(np.eye(obs.d) + G @ Sform, np.hstack([omega, omega_det]))
        omega = both[:, :cols] + B.T @ sla.cho_solve(Fo, E)
        omega_det = both[:, cols:]
        Cn = C @ sla.cho_solve(F, Se)
        C = 0.5 * (Cn + Cn.T)
        Gn = np.linalg.solve(np.eye(obs.d) + G @ Sform, G)
        G = 0.5 * (Gn + Gn.T)
        if i in checkpoints:
            pt = pobs.P @ (theta - np.tile(theta_det, replications))
            po = pst.P @ (omega - np.tile(omega_det, replications))
            out["mean_sq_p_theta"].append(float(np.einsum("ij,ij->", pt, pt) / cols))
            out["mean_sq_p_omega"].append(float(np.einsum("ij,ij->", po, po) / cols))
            out["bound_p_theta"].append(sig_norm * r / i)
            out["bound_p_omega"].append(u_fro_sq / i)
            for key, proj, cur, base in (
                ("max_q_theta_dev", pobs.Q, theta, q_t0),
                ("max_n_theta_dev", pobs.N, theta, n_t0),
                ("max_q_omega_dev", pst.Q, omega, q_o0),
                ("max_n_omega_dev", pst.N, omega, n_o0),
            ):
                X = proj @ cur
                dev = np.abs(np.sqrt(np.einsum("ij,ij->j", X, X)) - base).max()
                out[key] = max(out[key], float(dev))
    return out
