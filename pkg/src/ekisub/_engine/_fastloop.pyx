# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled EKI run loop.

Same contract as ekisub._engine.reference.run_loop, with the per-iteration
work done through BLAS/LAPACK calls on preallocated Fortran-ordered buffers.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm, dnrm2, dsyrk
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

from ..errors import SolveFailure

QUANTITIES = ("P_theta", "Q_theta", "N_theta", "P_omega", "Q_omega", "N_omega")


cdef void _project_norms(double[::1, :] proj, double[::1, :] X,
                         double[::1, :] work, double[:, :] out, Py_ssize_t row) noexcept:
    """out[row, j] = || proj @ X[:, j] || for every column j."""
    cdef int m = <int>proj.shape[0]
    cdef int J = <int>X.shape[1]
    cdef char cn = b'N'
    cdef double one = 1.0, zero = 0.0
    cdef int incx = 1
    cdef Py_ssize_t j
    dgemm(&cn, &cn, &m, &J, &m, &one, &proj[0, 0], &m, &X[0, 0], &m, &zero,
          &work[0, 0], &m)
    for j in range(J):
        out[row, j] = dnrm2(&m, &work[0, j], &incx)


def run_loop(V0, H, sigma_entries, y, vstar, p_obs, q_obs, n_obs, p_st, q_st, n_st,
             w1r, max_iters, stop_tol, noise):
    cdef Py_ssize_t d = V0.shape[0]
    cdef Py_ssize_t n = H.shape[0]
    cdef Py_ssize_t J = V0.shape[1]
    cdef Py_ssize_t r = w1r.shape[1]
    cdef Py_ssize_t cap = <Py_ssize_t>max_iters + 1
    cdef double tol = float(stop_tol)
    cdef bint has_noise = noise is not None

    Vf = np.array(V0, dtype=np.float64, order="F", copy=True)
    cdef double[::1, :] V = Vf
    cdef double[::1, :] Hm = np.asfortranarray(H, dtype=np.float64)
    cdef double[::1, :] Sg = np.asfortranarray(sigma_entries, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] vs = np.ascontiguousarray(vstar, dtype=np.float64)
    cdef double[::1, :] Po = np.asfortranarray(p_obs, dtype=np.float64)
    cdef double[::1, :] Qo = np.asfortranarray(q_obs, dtype=np.float64)
    cdef double[::1, :] No = np.asfortranarray(n_obs, dtype=np.float64)
    cdef double[::1, :] Ps = np.asfortranarray(p_st, dtype=np.float64)
    cdef double[::1, :] Qs = np.asfortranarray(q_st, dtype=np.float64)
    cdef double[::1, :] Ns = np.asfortranarray(n_st, dtype=np.float64)
    cdef double[::1, :] Wr = np.asfortranarray(w1r.reshape(n, -1), dtype=np.float64)
    cdef double[:, :, :] E = noise if has_noise else np.empty((1, 1, 1))
    if has_noise:
        E = np.ascontiguousarray(noise, dtype=np.float64)

    norms_np = {name: np.empty((cap, J)) for name in QUANTITIES}
    eig_np = np.empty((cap, r))
    cdef double[:, :] n_pt = norms_np["P_theta"]
    cdef double[:, :] n_qt = norms_np["Q_theta"]
    cdef double[:, :] n_nt = norms_np["N_theta"]
    cdef double[:, :] n_po = norms_np["P_omega"]
    cdef double[:, :] n_qo = norms_np["Q_omega"]
    cdef double[:, :] n_no = norms_np["N_omega"]
    cdef double[:, :] eig = eig_np

    cdef double[::1, :] TH = np.empty((n, J), order="F")
    cdef double[::1, :] OM = np.empty((d, J), order="F")
    cdef double[::1, :] wn = np.empty((n, J), order="F")
    cdef double[::1, :] wd = np.empty((d, J), order="F")
    cdef double[::1, :] THC = np.empty((n, J), order="F")
    cdef double[::1, :] AR = np.empty((max(r, 1), J), order="F")
    cdef double[::1, :] VC = np.empty((d, J), order="F")
    cdef double[::1, :] B = np.empty((n, J), order="F")
    cdef double[::1, :] S = np.empty((n, n), order="F")
    cdef double[::1, :] T = np.empty((n, J), order="F")
    cdef double[::1, :] X = np.empty((d, n), order="F")
    cdef double[::1] mu = np.empty(n)
    cdef double[::1] mv = np.empty(d)

    cdef char cn = b'N', ct = b'T', cl = b'L'
    cdef double one = 1.0, zero = 0.0
    cdef int info = 0
    cdef int im, iJ, id_, ir
    im = <int>n
    iJ = <int>J
    id_ = <int>d
    ir = <int>r
    cdef double scale = 1.0 / (J - 1)
    cdef double acc, pmax
    cdef Py_ssize_t i, j, k, records = 0

    for i in range(cap):
        # theta = H V - y 1^T, omega = V - vstar 1^T
        dgemm(&cn, &cn, &im, &iJ, &id_, &one, &Hm[0, 0], &im, &V[0, 0], &id_,
              &zero, &TH[0, 0], &im)
        for j in range(J):
            for k in range(n):
                TH[k, j] -= yv[k]
            for k in range(d):
                OM[k, j] = V[k, j] - vs[k]
        _project_norms(Po, TH, wn, n_pt, i)
        _project_norms(Qo, TH, wn, n_qt, i)
        _project_norms(No, TH, wn, n_nt, i)
        _project_norms(Ps, OM, wd, n_po, i)
        _project_norms(Qs, OM, wd, n_qo, i)
        _project_norms(Ns, OM, wd, n_no, i)
        if r > 0:
            for k in range(n):
                acc = 0.0
                for j in range(J):
                    acc += TH[k, j]
                mu[k] = acc / J
            for j in range(J):
                for k in range(n):
                    THC[k, j] = TH[k, j] - mu[k]
            dgemm(&ct, &cn, &ir, &iJ, &im, &one, &Wr[0, 0], &im, &THC[0, 0], &im,
                  &zero, &AR[0, 0], &ir)
            for k in range(r):
                acc = 0.0
                for j in range(J):
                    acc += AR[k, j] * AR[k, j]
                eig[i, k] = acc * scale
        records = i + 1
        if i == max_iters:
            break
        if tol > 0.0:
            pmax = 0.0
            for j in range(J):
                if n_pt[i, j] > pmax:
                    pmax = n_pt[i, j]
            if pmax < tol:
                break

        # step: V += Gamma H^T (C + sigma)^-1 innov
        for k in range(d):
            acc = 0.0
            for j in range(J):
                acc += V[k, j]
            mv[k] = acc / J
        for j in range(J):
            for k in range(d):
                VC[k, j] = V[k, j] - mv[k]
        dgemm(&cn, &cn, &im, &iJ, &id_, &one, &Hm[0, 0], &im, &VC[0, 0], &id_,
              &zero, &B[0, 0], &im)
        dsyrk(&cl, &cn, &im, &iJ, &scale, &B[0, 0], &im, &zero, &S[0, 0], &im)
        for j in range(n):
            for k in range(j, n):
                S[k, j] += Sg[k, j]
        dpotrf(&cl, &im, &S[0, 0], &im, &info)
        if info != 0:
            raise SolveFailure(
                f"innovation covariance factorization failed (lapack info={info})"
            )
        if has_noise:
            for j in range(J):
                for k in range(n):
                    T[k, j] = E[i, k, j] - TH[k, j]
        else:
            for j in range(J):
                for k in range(n):
                    T[k, j] = -TH[k, j]
        dpotrs(&cl, &im, &iJ, &S[0, 0], &im, &T[0, 0], &im, &info)
        if info != 0:
            raise SolveFailure(f"triangular solve failed (lapack info={info})")
        dgemm(&cn, &ct, &id_, &im, &iJ, &scale, &VC[0, 0], &id_, &B[0, 0], &im,
              &zero, &X[0, 0], &id_)
        dgemm(&cn, &cn, &id_, &iJ, &im, &one, &X[0, 0], &id_, &T[0, 0], &im,
              &one, &V[0, 0], &id_)

    out_norms = {name: arr[:records].copy() for name, arr in norms_np.items()}
    return np.ascontiguousarray(Vf), out_norms, eig_np[:records].copy(), int(records)
