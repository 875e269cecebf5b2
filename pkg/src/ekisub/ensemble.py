"""The EKI engine: ensembles, empirical statistics, Kalman updates, runs.

Particles are columns of a d x J array. Each update moves every particle by
the same gain applied to its own innovation; the deterministic variant uses
the data as-is, the stochastic variant perturbs it with noise drawn from the
observation error model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _engine, linops
from .errors import (
    DimensionMismatch,
    NoiseDimensionMismatch,
    SolveFailure,
    TooFewParticles,
    ValidationError,
)

VARIANTS = ("deterministic", "stochastic")


@dataclass(frozen=True)
class Ensemble:
    """Particle collection at a given iteration; columns are particles."""

    particles: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        P = np.asarray(self.particles, dtype=float)
        if P.ndim != 2:
            raise DimensionMismatch(f"particles must be d x J, got shape {P.shape}")
        if P.shape[1] < 2:
            raise TooFewParticles(f"need at least 2 particles, got {P.shape[1]}")
        if not np.isfinite(P).all():
            raise ValidationError("particles contain non-finite entries")
        object.__setattr__(self, "particles", P)

    @property
    def dim(self) -> int:
        return self.particles.shape[0]

    @property
    def n_particles(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class EnsembleStats:
    """Empirical moments of an ensemble pushed through an observer."""

    mean: np.ndarray
    cov: np.ndarray
    obs_cov: np.ndarray
    cross_cov: np.ndarray


@dataclass(frozen=True)
class NoiseDraw:
    """One block of observation-space perturbations, one column per particle."""

    eps: np.ndarray
    seed_state: str


class NoiseStream:
    """Reproducible source of N(0, sigma) particle perturbations.

    Draws are consumed one iteration at a time in a fixed order, so a block
    of `count` draws equals `count` sequential single draws. Streams built
    from the same seed produce identical sequences, which is what makes
    paired comparisons between runs meaningful.
    """

    def __init__(self, seed, sigma: linops.SpdMatrix, n_particles: int):
        if n_particles < 2:
            raise TooFewParticles(f"need at least 2 particles, got {n_particles}")
        if isinstance(seed, np.random.SeedSequence):
            self._label = f"ss{seed.entropy}:{seed.spawn_key}"
            seq = seed
        else:
            self._label = str(int(seed))
            seq = np.random.SeedSequence(int(seed))
        self._rng = np.random.default_rng(seq)
        self._sigma = sigma
        self._J = n_particles
        self._count = 0

    def draw(self) -> NoiseDraw:
        Z = self._rng.standard_normal((self._sigma.dim, self._J))
        state = f"seed={self._label},draw={self._count}"
        self._count += 1
        return NoiseDraw(eps=self._sigma.factor @ Z, seed_state=state)

    def draw_block(self, count: int) -> np.ndarray:
        """(count, n, J) block equal to `count` sequential draws."""
        out = np.empty((count, self._sigma.dim, self._J))
        for i in range(count):
            out[i] = self.draw().eps
        return out


def empirical_stats(ens: Ensemble, obs: linops.LinearObserver) -> EnsembleStats:
    """Sample mean and covariances with the unbiased 1/(J-1) divisor."""
    V = ens.particles
    if V.shape[0] != obs.d:
        raise DimensionMismatch(f"particles have dim {V.shape[0]}, observer expects {obs.d}")
    if V.shape[1] < 2:
        raise TooFewParticles("covariance needs at least 2 particles")
    J = V.shape[1]
    mean = V.mean(axis=1)
    Vc = V - mean[:, None]
    B = obs.H @ Vc
    cov = (Vc @ Vc.T) / (J - 1)
    obs_cov = (B @ B.T) / (J - 1)
    cross_cov = (Vc @ B.T) / (J - 1)
    return EnsembleStats(
        mean=mean,
        cov=0.5 * (cov + cov.T),
        obs_cov=0.5 * (obs_cov + obs_cov.T),
        cross_cov=cross_cov,
    )


def kalman_gain(stats: EnsembleStats, obs: linops.LinearObserver) -> np.ndarray:
    """K = cross_cov (obs_cov + sigma)^-1, via an SPD solve."""
    M = stats.obs_cov + obs.sigma.entries
    try:
        F = sla.cho_factor(0.5 * (M + M.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"innovation covariance not factorizable: {exc}") from None
    return sla.cho_solve(F, stats.cross_cov.T).T


def _check_y(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (n,):
        raise DimensionMismatch(f"y has shape {y.shape}, expected ({n},)")
    return y


def eki_step_deterministic(ens: Ensemble, obs: linops.LinearObserver, y) -> Ensemble:
    """One particle update against the unperturbed data."""
    y = _check_y(y, obs.n)
    stats = empirical_stats(ens, obs)
    K = kalman_gain(stats, obs)
    V = ens.particles + K @ (y[:, None] - obs.H @ ens.particles)
    return Ensemble(particles=V, iteration=ens.iteration + 1)


def eki_step_stochastic(ens: Ensemble, obs: linops.LinearObserver, y, noise) -> Ensemble:
    """One particle update against per-particle perturbed data.

    noise is a NoiseDraw or a bare (n, J) array of data perturbations.
    """
    y = _check_y(y, obs.n)
    eps = np.asarray(noise.eps if isinstance(noise, NoiseDraw) else noise, dtype=float)
    if eps.shape != (obs.n, ens.n_particles):
        raise NoiseDimensionMismatch(
            f"noise block has shape {eps.shape}, expected ({obs.n}, {ens.n_particles})"
        )
    stats = empirical_stats(ens, obs)
    K = kalman_gain(stats, obs)
    V = ens.particles + K @ (y[:, None] + eps - obs.H @ ens.particles)
    return Ensemble(particles=V, iteration=ens.iteration + 1)


def misfit_map(stats: EnsembleStats, obs: linops.LinearObserver) -> np.ndarray:
    """The matrix sigma (obs_cov + sigma)^-1 driving the data-misfit recursion."""
    M = stats.obs_cov + obs.sigma.entries
    try:
        F = sla.cho_factor(0.5 * (M + M.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"misfit map solve failed: {exc}") from None
    return sla.cho_solve(F, obs.sigma.entries).T


def residual_map(stats: EnsembleStats, obs: linops.LinearObserver) -> np.ndarray:
    """The matrix (I + cov H^T sigma^-1 H)^-1 driving the residual recursion."""
    Hw = sla.solve_triangular(obs.sigma.factor, obs.H, lower=True)
    S = Hw.T @ Hw
    A = np.eye(obs.d) + stats.cov @ S
    try:
        return np.linalg.solve(A, np.eye(obs.d))
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"residual map solve failed: {exc}") from None


def run(
    ens0: Ensemble,
    obs: linops.LinearObserver,
    y,
    variant: str = "deterministic",
    max_iters: int = 100,
    stop_tol: float = 0.0,
    rng_seed=0,
):
    """Run EKI and record a full diagnostic trace.

    Builds the fundamental-subspace projectors from the initial ensemble,
    freezes them, and records per-particle projected misfit/residual norms
    plus eigenvalue snapshots at every iteration (including i=0). Stops
    after max_iters steps, or earlier once every particle's populated-misfit
    norm falls below stop_tol (stop_tol = 0 disables early stopping).

    Returns (final Ensemble, RunTrace).
    """
    from . import diagnostics, subspaces

    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")
    if stop_tol < 0.0:
        raise ValidationError(f"stop_tol must be >= 0, got {stop_tol}")
    y = _check_y(y, obs.n)

    stats0 = empirical_stats(ens0, obs)
    obasis = subspaces.build_observation_basis(stats0, obs)
    sbasis = subspaces.build_state_basis(obasis, stats0, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, y)

    noise = None
    if variant == "stochastic":
        noise = NoiseStream(rng_seed, obs.sigma, ens0.n_particles).draw_block(max_iters)

    V, norms, eig, records = _engine.run_loop(
        ens0.particles, obs.H, obs.sigma.entries, y, vstar,
        pobs.P, pobs.Q, pobs.N, pst.P, pst.Q, pst.N,
        obasis.W[:, : obasis.r], max_iters, float(stop_tol), noise,
    )
    trace = diagnostics.RunTrace(
        variant=variant,
        iterations=np.arange(records),
        norms=norms,
        eigenvalues=eig,
    )
    return Ensemble(particles=V, iteration=records - 1), trace
