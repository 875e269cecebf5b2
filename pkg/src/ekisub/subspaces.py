"""Fundamental subspaces of a linear observer relative to an ensemble.

The observation space splits three ways: directions the initial ensemble
actually excites (populated), observable directions it misses (observable
unpopulated), and directions the observer cannot see at all (kernel of H^T).
A sigma-orthonormal basis W realizes the splitting; oblique projectors built
from W commute with the EKI iteration maps, which is what makes per-subspace
convergence statements possible. A companion basis U does the same for state
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import linops
from .errors import (
    DimensionMismatch,
    NonPositiveValues,
    RankDeficiencyInconsistent,
    ValidationError,
)


@dataclass(frozen=True)
class ObservationBasis:
    """sigma-orthonormal basis W with the i=0 pencil eigenvalues.

    Columns [0, r) span the populated observable directions, [r, h) complete
    the observable range, [h, n) span Ker(H^T). delta0 holds the pencil
    eigenvalues (zeros beyond r).
    """

    W: np.ndarray
    delta0: np.ndarray
    r: int
    h: int

    @property
    def populated(self) -> np.ndarray:
        return self.W[:, : self.r]

    @property
    def unpopulated(self) -> np.ndarray:
        return self.W[:, self.r : self.h]

    @property
    def kernel(self) -> np.ndarray:
        return self.W[:, self.h :]


@dataclass(frozen=True)
class StateBasis:
    """State-space counterpart: h columns, normalized in the H^T sigma^-1 H form."""

    U: np.ndarray
    r: int
    h: int


@dataclass(frozen=True)
class ProjectorSet:
    """Complementary oblique projectors P (populated), Q (unpopulated), N (rest)."""

    P: np.ndarray
    Q: np.ndarray
    N: np.ndarray
    space: str


def build_observation_basis(
    stats, obs: linops.LinearObserver, rank_tol: float | None = None
) -> ObservationBasis:
    """Diagonalize the (obs_cov, sigma) pencil and complete the basis.

    The leading r columns are pencil eigenvectors with positive eigenvalue;
    completion candidates come from SVD bases of sigma^-1 H (observable) and
    of Ker(H^T), passed through sigma-weighted Gram-Schmidt against what is
    already in place.
    """
    tol = obs.rank_tol if rank_tol is None else rank_tol
    n, h = obs.n, obs.rank_h
    ge = linops.gen_eig_pencil(stats.obs_cov, obs.sigma, tol)
    r = ge.pos_count
    if r > h:
        raise RankDeficiencyInconsistent(
            f"{r} populated directions but observer rank is only {h}"
        )
    W = np.empty((n, n))
    W[:, :r] = ge.vectors[:, :r]
    if h > r:
        obs_range = obs.sigma.solve(obs.H)
        Ub, _, _ = np.linalg.svd(obs_range, full_matrices=False)
        cand = linops.fix_signs(Ub[:, :h])
        add = linops.sigma_orthonormalize(cand, obs.sigma, against=W[:, :r])
        if add.shape[1] < h - r:
            raise RankDeficiencyInconsistent(
                f"could only complete {add.shape[1]} of {h - r} observable directions"
            )
        W[:, r:h] = add[:, : h - r]
    if n > h:
        Uh, _, _ = np.linalg.svd(obs.H, full_matrices=True)
        ker = linops.fix_signs(Uh[:, h:])
        add = linops.sigma_orthonormalize(ker, obs.sigma, against=W[:, :h])
        if add.shape[1] < n - h:
            raise RankDeficiencyInconsistent(
                f"could only complete {add.shape[1]} of {n - h} kernel directions"
            )
        W[:, h:] = add
    delta0 = np.concatenate([ge.values[:r], np.zeros(n - r)])
    return ObservationBasis(W=W, delta0=delta0, r=r, h=h)


def build_state_basis(basis: ObservationBasis, stats, obs: linops.LinearObserver) -> StateBasis:
    """Map the observable W columns into state space.

    Populated columns come from the cross covariance scaled by 1/delta;
    unpopulated ones are weighted-pseudoinverse images of sigma w. Both
    satisfy H u = sigma w, which normalizes U in the H^T sigma^-1 H form.
    """
    r, h = basis.r, basis.h
    U = np.empty((obs.d, h))
    if r:
        U[:, :r] = (stats.cross_cov @ basis.W[:, :r]) / basis.delta0[:r]
    if h > r:
        U[:, r:h] = linops.weighted_pseudoinverse_apply(
            obs, obs.sigma.entries @ basis.W[:, r:h]
        )
    return StateBasis(U=U, r=r, h=h)


def observation_projectors(basis: ObservationBasis, sigma: linops.SpdMatrix) -> ProjectorSet:
    W = basis.W
    S = sigma.entries
    P = S @ W[:, : basis.r] @ W[:, : basis.r].T
    Q = S @ W[:, basis.r : basis.h] @ W[:, basis.r : basis.h].T
    N = S @ W[:, basis.h :] @ W[:, basis.h :].T
    return ProjectorSet(P=P, Q=Q, N=N, space="observation")


def state_projectors(sbasis: StateBasis, obs: linops.LinearObserver) -> ProjectorSet:
    Hw = sla.solve_triangular(obs.sigma.factor, obs.H, lower=True)
    S = Hw.T @ Hw
    U = sbasis.U
    P = U[:, : sbasis.r] @ U[:, : sbasis.r].T @ S
    Q = U[:, sbasis.r :] @ U[:, sbasis.r :].T @ S
    N = np.eye(obs.d) - P - Q
    return ProjectorSet(P=P, Q=Q, N=N, space="state")


def _as_nonneg_array(delta0) -> np.ndarray:
    d = np.atleast_1d(np.asarray(delta0, dtype=float))
    if (d < 0).any():
        raise NonPositiveValues("eigenvalues must be nonnegative")
    return d


def predict_eigenvalues_deterministic(delta0, iterations: int) -> np.ndarray:
    """Iterate delta -> delta / (1 + delta)^2, elementwise."""
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    d = _as_nonneg_array(delta0).copy()
    for _ in range(iterations):
        d = d / (1.0 + d) ** 2
    return d


def predict_eigenvalues_stochastic(delta0, iterations: int) -> np.ndarray:
    """Closed form of delta -> delta / (1 + delta): delta0 / (1 + i delta0)."""
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    d = _as_nonneg_array(delta0)
    return d / (1.0 + iterations * d)


def eigenvalue_bounds_deterministic(delta0, iterations: int):
    """Strict envelope for the deterministic recurrence after i iterations.

    Returns (lower, upper) with upper = 1/(2i) and
    lower = 1/(2i) - (c + log i)/(8 i^2), c = 2 (1/delta0 + delta0 + 1).
    Requires strictly positive delta0 and i >= 1.
    """
    if iterations < 1:
        raise ValidationError("bounds hold from iteration 1 on")
    d = _as_nonneg_array(delta0)
    if (d <= 0).any():
        raise NonPositiveValues("bounds require strictly positive delta0")
    i = float(iterations)
    c = 2.0 * (1.0 / d + d + 1.0)
    upper = np.full_like(d, 1.0 / (2.0 * i))
    lower = 1.0 / (2.0 * i) - (c + np.log(i)) / (8.0 * i * i)
    return lower, upper
