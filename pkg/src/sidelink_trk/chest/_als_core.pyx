# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled complex CP-ALS sweep loop (same contract as ``_als_py.als_run``).

The two tensor contractions per sweep go through BLAS zgemm; the R x R
Gram solves are done with an in-place complex Cholesky.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs
from scipy.linalg.cython_blas cimport zgemm

cnp.import_array()

ctypedef double complex cplx


cdef inline double _abs2(cplx z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef int _chol_solve_rows(cplx[:, ::1] G, cplx[:, ::1] M, cplx[:, ::1] X,
                          cplx[:, ::1] L, double ridge) noexcept nogil:
    """X G = M with G Hermitian PSD. Returns 1 if G looked ill-conditioned."""
    cdef Py_ssize_t R = G.shape[0], n = M.shape[0]
    cdef Py_ssize_t i, j, k, row
    cdef double scale = 0.0, d, dmin = 1e300
    cdef cplx s
    cdef int ill = 0
    for i in range(R):
        if G[i, i].real > scale:
            scale = G[i, i].real
    if scale < 1e-300:
        scale = 1e-300
    # L L^H = conj(G) + ridge*scale*I
    for i in range(R):
        for j in range(i + 1):
            s = G[i, j].conjugate()
            if i == j:
                s = s + ridge * scale
            for k in range(j):
                s = s - L[i, k] * L[j, k].conjugate()
            if i == j:
                d = s.real
                if d < dmin:
                    dmin = d
                if d <= 1e-300 * scale:
                    d = 1e-300 * scale
                    ill = 1
                L[i, i] = sqrt(d)
            else:
                L[i, j] = s / L[j, j].real
        for j in range(i + 1, R):
            L[i, j] = 0
    # the pivot is ridge-dominated: the unregularised Gram is near singular
    if dmin < (1e-12 + 10.0 * ridge) * scale:
        ill = 1
    # for each row: solve L L^H x = m
    for row in range(n):
        for i in range(R):
            s = M[row, i]
            for k in range(i):
                s = s - L[i, k] * X[row, k]
            X[row, i] = s / L[i, i].real
        for i in range(R - 1, -1, -1):
            s = X[row, i]
            for k in range(i + 1, R):
                s = s - L[k, i].conjugate() * X[row, k]
            X[row, i] = s / L[i, i].real
    return ill


cdef void _gram(cplx[:, ::1] F, cplx[:, ::1] G) noexcept nogil:
    """G[r, s] = sum_n F[n, r] conj(F[n, s])."""
    cdef Py_ssize_t n = F.shape[0], R = F.shape[1], a, r, s
    for r in range(R):
        for s in range(R):
            G[r, s] = 0
    for a in range(n):
        for r in range(R):
            for s in range(R):
                G[r, s] = G[r, s] + F[a, r] * F[a, s].conjugate()


cdef void _normalize_cols(cplx[:, ::1] F) noexcept nogil:
    cdef Py_ssize_t n = F.shape[0], R = F.shape[1], a, r
    cdef double nrm
    for r in range(R):
        nrm = 0.0
        for a in range(n):
            nrm += _abs2(F[a, r])
        nrm = sqrt(nrm)
        if nrm < 1e-300:
            nrm = 1e-300
        for a in range(n):
            F[a, r] = F[a, r] / nrm


def als_run(Y_in, A_in, B_in, C_in, int max_iters, double tol, double ridge):
    cdef cplx[:, :, ::1] Y = np.ascontiguousarray(Y_in, dtype=np.complex128)
    cdef Py_ssize_t I = Y.shape[0], J = Y.shape[1], K = Y.shape[2]
    cdef Py_ssize_t IJ = I * J
    A_np = np.array(A_in, dtype=np.complex128, order="C")
    B_np = np.array(B_in, dtype=np.complex128, order="C")
    C_np = np.array(C_in, dtype=np.complex128, order="C")
    cdef cplx[:, ::1] A = A_np
    cdef cplx[:, ::1] B = B_np
    cdef cplx[:, ::1] C = C_np
    cdef Py_ssize_t R = A.shape[1]

    cdef cplx[:, ::1] Cconj = np.empty((K, R), dtype=np.complex128)
    cdef cplx[:, ::1] W = np.empty((IJ, R), dtype=np.complex128)
    cdef cplx[:, ::1] KRc = np.empty((IJ, R), dtype=np.complex128)
    cdef cplx[:, ::1] M1 = np.empty((I, R), dtype=np.complex128)
    cdef cplx[:, ::1] M2 = np.empty((J, R), dtype=np.complex128)
    cdef cplx[:, ::1] M3 = np.empty((K, R), dtype=np.complex128)
    cdef cplx[:, ::1] GA = np.empty((R, R), dtype=np.complex128)
    cdef cplx[:, ::1] GB = np.empty((R, R), dtype=np.complex128)
    cdef cplx[:, ::1] GC = np.empty((R, R), dtype=np.complex128)
    cdef cplx[:, ::1] G = np.empty((R, R), dtype=np.complex128)
    cdef cplx[:, ::1] L = np.zeros((R, R), dtype=np.complex128)
    res_np = np.zeros(max(max_iters, 1), dtype=np.float64)
    cdef double[::1] res = res_np

    cdef cplx one = 1.0, zero = 0.0, s
    cdef int m, n, k, lda, ldb, ldc
    cdef char transN = b'N', transT = b'T'
    cdef Py_ssize_t it, i, j, r, q, kk, a
    cdef int n_ill = 0, n_done = 0
    cdef double ynorm2 = 0.0, fit, rel2, rcur, e2

    for i in range(I):
        for j in range(J):
            for kk in range(K):
                ynorm2 += _abs2(Y[i, j, kk])
    if ynorm2 == 0.0:
        return A_np, B_np, np.zeros_like(C_np), np.zeros(1), 0

    with nogil:
        for it in range(max_iters):
            _gram(C, GC)
            for kk in range(K):
                for r in range(R):
                    Cconj[kk, r] = C[kk, r].conjugate()
            # W^T (R x IJ, col-major) = Cconj^T (R x K) * Y^T (K x IJ)
            m = <int>R; n = <int>IJ; k = <int>K; lda = <int>R; ldb = <int>K; ldc = <int>R
            zgemm(&transN, &transN, &m, &n, &k, &one, &Cconj[0, 0], &lda,
                  &Y[0, 0, 0], &ldb, &zero, &W[0, 0], &ldc)

            # mode 1
            for i in range(I):
                for r in range(R):
                    s = 0
                    for j in range(J):
                        s = s + W[i * J + j, r] * B[j, r].conjugate()
                    M1[i, r] = s
            _gram(B, GB)
            for r in range(R):
                for q in range(R):
                    G[r, q] = GB[r, q] * GC[r, q]
            n_ill += _chol_solve_rows(G, M1, A, L, ridge)
            _normalize_cols(A)

            # mode 2
            for j in range(J):
                for r in range(R):
                    s = 0
                    for i in range(I):
                        s = s + W[i * J + j, r] * A[i, r].conjugate()
                    M2[j, r] = s
            _gram(A, GA)
            for r in range(R):
                for q in range(R):
                    G[r, q] = GA[r, q] * GC[r, q]
            n_ill += _chol_solve_rows(G, M2, B, L, ridge)
            _normalize_cols(B)

            # mode 3: M3^T (R x K) = conj(KR)^T (R x IJ) * Y (IJ x K)
            for i in range(I):
                for j in range(J):
                    for r in range(R):
                        KRc[i * J + j, r] = (A[i, r] * B[j, r]).conjugate()
            _gram(B, GB)
            m = <int>R; n = <int>K; k = <int>IJ; lda = <int>R; ldb = <int>K; ldc = <int>R
            zgemm(&transN, &transT, &m, &n, &k, &one, &KRc[0, 0], &lda,
                  &Y[0, 0, 0], &ldb, &zero, &M3[0, 0], &ldc)
            for r in range(R):
                for q in range(R):
                    G[r, q] = GA[r, q] * GB[r, q]
            n_ill += _chol_solve_rows(G, M3, C, L, ridge)

            # residual from Gram identities
            _gram(C, GC)
            fit = 0.0
            for kk in range(K):
                for r in range(R):
                    fit += 2.0 * (C[kk, r] * M3[kk, r].conjugate()).real
            for r in range(R):
                for q in range(R):
                    fit -= (G[r, q] * GC[r, q]).real
            rel2 = 1.0 - fit / ynorm2
            if rel2 < 1e-10:
                e2 = 0.0
                for i in range(I):
                    for j in range(J):
                        for kk in range(K):
                            s = Y[i, j, kk]
                            for r in range(R):
                                s = s - A[i, r] * B[j, r] * C[kk, r]
                            e2 += _abs2(s)
                rel2 = e2 / ynorm2
            if rel2 < 0.0:
                rel2 = 0.0
            rcur = sqrt(rel2)
            res[it] = rcur
            n_done = it + 1
            if rcur < 1e-13:
                break
            if it > 0 and res[it - 1] - rcur < tol * res[it - 1]:
                break

    return A_np, B_np, C_np, res_np[:n_done].copy(), n_ill
