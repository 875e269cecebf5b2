import numpy as np
import pytest
from hypothesis import given, strategies as st

from ekisub import errors, linops


def bruteforce_min_norm(H, sigma_entries, y):
    """Dense normal-equation solution on an explicit row-space basis.

    Deliberately uses a different route than the library (explicit inverse
    plus SVD basis) so the two can cross-check each other.
    """
    U, s, Vt = np.linalg.svd(H)
    h = int((s > 1e-10 * s[0]).sum())
    B = Vt[:h].T
    Si = np.linalg.inv(sigma_entries)
    A = B.T @ H.T @ Si @ H @ B
    b = B.T @ H.T @ Si @ y
    return B @ np.linalg.solve(A, b)


class TestSpdMatrix:
    def test_identity(self):
        spd = linops.spd_from_dense(np.eye(3))
        assert spd.dim == 3
        np.testing.assert_allclose(spd.factor, np.eye(3))

    def test_hand_cholesky(self):
        # [[2,1],[1,2]]: L = [[sqrt(2), 0], [1/sqrt(2), sqrt(3/2)]]
        spd = linops.spd_from_dense(np.array([[2.0, 1.0], [1.0, 2.0]]))
        expect = np.array([[np.sqrt(2.0), 0.0], [1.0 / np.sqrt(2.0), np.sqrt(1.5)]])
        np.testing.assert_allclose(spd.factor, expect, rtol=1e-14)
        np.testing.assert_allclose(spd.factor @ spd.factor.T, spd.entries, rtol=1e-14)

    def test_rejects_indefinite(self):
        with pytest.raises(errors.NotPositiveDefinite):
            linops.spd_from_dense(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_zero(self):
        with pytest.raises(errors.NotPositiveDefinite):
            linops.spd_from_dense(np.zeros((2, 2)))

    def test_rejects_asymmetric(self):
        with pytest.raises(errors.NotSymmetric):
            linops.spd_from_dense(np.array([[1.0, 0.1], [0.0, 1.0]]))

    def test_rejects_nonsquare(self):
        with pytest.raises(errors.DimensionMismatch):
            linops.spd_from_dense(np.ones((2, 3)))

    def test_solve_matches_dense(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((5, 5))
        M = A @ A.T + 5.0 * np.eye(5)
        spd = linops.spd_from_dense(M)
        b = rng.standard_normal((5, 2))
        np.testing.assert_allclose(spd.solve(b), np.linalg.solve(M, b), rtol=1e-12)


class TestGenEigPencil:
    def test_zero_matrix(self):
        sigma = linops.spd_from_dense(np.eye(3))
        res = linops.gen_eig_pencil(np.zeros((3, 3)), sigma)
        assert res.pos_count == 0
        np.testing.assert_allclose(res.values, 0.0, atol=1e-15)
        np.testing.assert_allclose(res.vectors.T @ sigma.entries @ res.vectors, np.eye(3), atol=1e-12)

    def test_sigma_itself(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((4, 4))
        sigma = linops.spd_from_dense(A @ A.T + 4.0 * np.eye(4))
        res = linops.gen_eig_pencil(sigma.entries, sigma)
        np.testing.assert_allclose(res.values, 1.0, rtol=1e-12)
        assert res.pos_count == 4

    def test_diagonal_hand_case(self):
        # (diag(2, 0), I): values (2, 0), leading vector e1 up to sign fixing
        sigma = linops.spd_from_dense(np.eye(2))
        res = linops.gen_eig_pencil(np.diag([2.0, 0.0]), sigma)
        np.testing.assert_allclose(res.values, [2.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(res.vectors[:, 0], [1.0, 0.0], atol=1e-15)
        assert res.pos_count == 1

    def test_values_sorted_nonnegative(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((6, 3))
        A = X @ X.T
        S = rng.standard_normal((6, 6))
        sigma = linops.spd_from_dense(S @ S.T + 6.0 * np.eye(6))
        res = linops.gen_eig_pencil(A, sigma)
        assert np.all(np.diff(res.values) <= 0)
        assert np.all(res.values >= 0)
        assert res.pos_count == 3

    @given(st.integers(1, 8), st.integers(0, 8), st.integers(0, 10**6))
    def test_pencil_invariants(self, n, k, seed):
        k = min(k, n)
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, k)) if k else np.zeros((n, 0))
        A = X @ X.T
        S = rng.standard_normal((n, n))
        sigma = linops.spd_from_dense(S @ S.T + n * np.eye(n))
        res = linops.gen_eig_pencil(A, sigma)
        scale = 1.0 + np.linalg.norm(A)
        assert np.linalg.norm(res.vectors.T @ sigma.entries @ res.vectors - np.eye(n)) < 1e-10 * n
        assert np.linalg.norm(A @ res.vectors - sigma.entries @ res.vectors @ np.diag(res.values)) < 1e-9 * scale
        assert res.pos_count <= k


class TestNumericalRank:
    def test_zero(self):
        assert linops.numerical_rank(np.zeros((3, 4))) == 0

    def test_identity(self):
        assert linops.numerical_rank(np.eye(3)) == 3

    def test_near_singular(self):
        assert linops.numerical_rank(np.diag([1.0, 1e-14, 0.5])) == 2

    def test_bad_tolerance(self):
        with pytest.raises(ValueError):
            linops.numerical_rank(np.eye(2), rel_tol=0.0)


class TestWeightedPseudoinverse:
    def test_identity_observer(self):
        obs = linops.make_observer(np.eye(2), np.eye(2))
        y = np.array([3.0, -1.0])
        np.testing.assert_allclose(linops.weighted_pseudoinverse_apply(obs, y), y, atol=1e-14)

    def test_wide_hand_case(self):
        # H = [[1, 0]]: the minimum-norm preimage of y=2 is (2, 0)
        obs = linops.make_observer(np.array([[1.0, 0.0]]), np.eye(1))
        np.testing.assert_allclose(
            linops.weighted_pseudoinverse_apply(obs, np.array([2.0])), [2.0, 0.0], atol=1e-14
        )

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        h = int(rng.integers(1, min(n, d) + 1))
        U = np.linalg.qr(rng.standard_normal((n, n)))[0]
        V = np.linalg.qr(rng.standard_normal((d, d)))[0]
        H = U[:, :h] @ np.diag(rng.uniform(0.5, 2.0, h)) @ V[:, :h].T
        S = rng.standard_normal((n, n))
        sigma_entries = S @ S.T + n * np.eye(n)
        obs = linops.make_observer(H, sigma_entries)
        y = rng.standard_normal(n)
        got = linops.weighted_pseudoinverse_apply(obs, y)
        want = bruteforce_min_norm(H, sigma_entries, y)
        assert np.linalg.norm(got - want) <= 1e-8 * (1.0 + np.linalg.norm(want))

    def test_minimum_norm_among_fits(self):
        rng = np.random.default_rng(99)
        H = rng.standard_normal((3, 6))
        obs = linops.make_observer(H, np.eye(3))
        y = rng.standard_normal(3)
        vstar = linops.weighted_pseudoinverse_apply(obs, y)
        # kernel basis of H
        _, s, Vt = np.linalg.svd(H)
        K = Vt[3:].T
        np.testing.assert_allclose(K.T @ vstar, 0.0, atol=1e-12)
        base = np.linalg.norm(vstar)
        for _ in range(100):
            z = K @ rng.standard_normal(3)
            assert np.linalg.norm(vstar + z) >= base - 1e-12

    def test_matrix_right_hand_side(self):
        rng = np.random.default_rng(5)
        H = rng.standard_normal((3, 5))
        obs = linops.make_observer(H, np.eye(3))
        Y = rng.standard_normal((3, 4))
        got = linops.weighted_pseudoinverse_apply(obs, Y)
        for j in range(4):
            np.testing.assert_allclose(
                got[:, j], linops.weighted_pseudoinverse_apply(obs, Y[:, j]), atol=1e-13
            )


class TestSigmaOrthonormalize:
    def test_drops_dependent_columns(self):
        sigma = linops.spd_from_dense(np.eye(3))
        cand = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
        W = linops.sigma_orthonormalize(cand, sigma)
        assert W.shape == (3, 2)
        np.testing.assert_allclose(W.T @ W, np.eye(2), atol=1e-12)

    def test_respects_existing_block(self):
        rng = np.random.default_rng(13)
        S = rng.standard_normal((4, 4))
        sigma = linops.spd_from_dense(S @ S.T + 4 * np.eye(4))
        first = linops.sigma_orthonormalize(rng.standard_normal((4, 2)), sigma)
        more = linops.sigma_orthonormalize(rng.standard_normal((4, 4)), sigma, against=first)
        full = np.hstack([first, more])
        np.testing.assert_allclose(full.T @ sigma.entries @ full, np.eye(4), atol=1e-10)


def test_fix_signs():
    W = np.array([[-2.0, 1.0], [1.0, 3.0]])
    out = linops.fix_signs(W.copy())
    np.testing.assert_allclose(out[:, 0], [2.0, -1.0])
    np.testing.assert_allclose(out[:, 1], [1.0, 3.0])
