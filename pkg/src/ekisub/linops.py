"""Weighted dense linear algebra.

Everything downstream works in the geometry induced by a symmetric positive
definite weight matrix: generalized eigenpairs of a PSD/SPD pencil,
weight-orthonormalization, the weighted least-squares pseudoinverse, and
numerical rank decisions. All matrices are dense float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    NotPositiveDefinite,
    NotSymmetric,
    SolveFailure,
)

DEFAULT_RANK_TOL = 1e-10
_SYM_RTOL = 1e-12


@dataclass(frozen=True)
class SpdMatrix:
    """SPD matrix bundled with its lower-triangular Cholesky factor."""

    entries: np.ndarray
    factor: np.ndarray

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``entries @ x = b`` through the cached factor."""
        return sla.cho_solve((self.factor, True), b)


@dataclass(frozen=True)
class LinearObserver:
    """Forward map H (n x d) with SPD noise covariance and its numerical rank."""

    H: np.ndarray
    sigma: SpdMatrix
    rank_h: int
    rank_tol: float

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]


@dataclass(frozen=True)
class GenEigResult:
    """Eigenpairs of a pencil (A, sigma): A w = delta sigma w.

    vectors: columns sigma-orthonormal, same order as values.
    values: nonincreasing, clipped at zero.
    pos_count: number of values above rank_tol relative to the largest.
    """

    vectors: np.ndarray
    values: np.ndarray
    pos_count: int


def _as_square_float(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    return M


def spd_from_dense(M) -> SpdMatrix:
    """Validate symmetry and positive definiteness, return matrix + factor."""
    M = _as_square_float(M)
    scale = np.abs(M).max()
    if scale == 0.0:
        raise NotPositiveDefinite("zero matrix is not positive definite")
    if np.abs(M - M.T).max() > _SYM_RTOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-12 relative")
    M = 0.5 * (M + M.T)
    try:
        factor = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    return SpdMatrix(entries=M, factor=factor)


def make_observer(H, sigma, rank_tol: float = DEFAULT_RANK_TOL) -> LinearObserver:
    """Bundle a forward map with its noise model; rank_h is computed here.

    sigma may be an SpdMatrix or a dense array, which is validated first.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise DimensionMismatch(f"H must be 2-D, got shape {H.shape}")
    if not isinstance(sigma, SpdMatrix):
        sigma = spd_from_dense(sigma)
    if H.shape[0] != sigma.dim:
        raise DimensionMismatch(
            f"H has {H.shape[0]} rows but sigma is {sigma.dim} x {sigma.dim}"
        )
    return LinearObserver(H=H, sigma=sigma, rank_h=numerical_rank(H, rank_tol), rank_tol=rank_tol)


def numerical_rank(M, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Count singular values above rel_tol times the largest one."""
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    M = np.asarray(M, dtype=float)
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def fix_signs(M: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    M = np.array(M, dtype=float)
    if M.size == 0:
        return M
    idx = np.abs(M).argmax(axis=0)
    flip = M[idx, np.arange(M.shape[1])] < 0
    M[:, flip] *= -1.0
    return M


def gen_eig_pencil(A, sigma: SpdMatrix, rank_tol: float = DEFAULT_RANK_TOL) -> GenEigResult:
    """Solve A w = delta sigma w for symmetric PSD A by congruence.

    With sigma = L L^T the pencil reduces to eigh(L^-1 A L^-T); eigenvectors
    map back as w = L^-T q, which makes them sigma-orthonormal. Values come
    out nonincreasing with round-off negatives clipped to zero. Ordering of
    equal values follows the underlying symmetric eigensolver.
    """
    A = _as_square_float(A)
    if A.shape[0] != sigma.dim:
        raise DimensionMismatch(
            f"pencil dimensions differ: A is {A.shape[0]}, sigma is {sigma.dim}"
        )
    L = sigma.factor
    X = sla.solve_triangular(L, A, lower=True)
    B = sla.solve_triangular(L, X.T, lower=True)
    B = 0.5 * (B + B.T)
    try:
        vals, Q = np.linalg.eigh(B)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(f"symmetric eigensolve failed: {exc}") from None
    vals = vals[::-1]
    Q = Q[:, ::-1]
    W = sla.solve_triangular(L, Q, lower=True, trans="T")
    W = fix_signs(W)
    vals = np.maximum(vals, 0.0)
    pos = 0
    if vals.size and vals[0] > 0.0:
        pos = int(np.count_nonzero(vals > rank_tol * vals[0]))
    return GenEigResult(vectors=W, values=vals, pos_count=pos)


def sigma_orthonormalize(
    candidates: np.ndarray,
    sigma: SpdMatrix,
    against: np.ndarray | None = None,
    drop_tol: float = 1e-8,
) -> np.ndarray:
    """Weighted modified Gram-Schmidt with a second reorthogonalization pass.

    Accepts candidate columns one at a time, subtracting sigma-projections on
    `against` (assumed sigma-orthonormal already) and on previously accepted
    columns. Candidates whose sigma-norm collapses below drop_tol times the
    incoming sigma-norm are discarded.
    """
    n = sigma.dim
    cand = np.asarray(candidates, dtype=float).reshape(n, -1)
    kept: list[np.ndarray] = []
    prior = [] if against is None else [np.asarray(against[:, j], dtype=float) for j in range(against.shape[1])]
    S = sigma.entries
    for j in range(cand.shape[1]):
        v = cand[:, j].copy()
        ref = np.sqrt(v @ (S @ v))
        if ref == 0.0:
            continue
        for _ in range(2):
            for b in prior:
                v -= (b @ (S @ v)) * b
            for b in kept:
                v -= (b @ (S @ v)) * b
        nrm = np.sqrt(v @ (S @ v))
        if nrm > drop_tol * ref:
            kept.append(v / nrm)
    if not kept:
        return np.empty((n, 0))
    return fix_signs(np.column_stack(kept))


def weighted_pseudoinverse_apply(obs: LinearObserver, y: np.ndarray) -> np.ndarray:
    """Minimum-norm minimizer of ||y - H v|| in the sigma^-1 metric.

    Computes pinv(H^T sigma^-1 H) H^T sigma^-1 y through a truncated
    eigendecomposition, truncating with the observer's rank_tol. Accepts a
    single right-hand side or a matrix of columns.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = y.reshape(obs.n, -1) if single or y.ndim == 2 else None
    if Y is None or Y.shape[0] != obs.n:
        raise DimensionMismatch(f"y has shape {y.shape}, expected leading dim {obs.n}")
    L = obs.sigma.factor
    Hw = sla.solve_triangular(L, obs.H, lower=True)
    S = Hw.T @ Hw
    rhs = Hw.T @ sla.solve_triangular(L, Y, lower=True)
    lam, V = np.linalg.eigh(S)
    keep = lam > obs.rank_tol * lam[-1] if lam.size and lam[-1] > 0 else np.zeros_like(lam, bool)
    Vk = V[:, keep]
    out = Vk @ ((Vk.T @ rhs) / lam[keep, None])
    return out[:, 0] if single else out
