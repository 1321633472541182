"""Reference NumPy implementation of the complex CP-ALS sweep loop.

Same contract as the compiled ``_als_core.als_run``; used when the
extension is not built or ``SIDELINK_TRK_PURE=1``.
"""

import numpy as np


def _solve_gram(G, M, ridge):
    """Solve ``X G = M`` for Hermitian PSD ``G`` with a relative ridge.

    Returns the solution and whether the Gram matrix was ill-conditioned.
    """
    R = G.shape[0]
    scale = max(float(np.max(np.real(np.diag(G)))), 1e-300)
    Gr = G + ridge * scale * np.eye(R)
    # X G = M  <=>  G^T X^T = M^T, and G^T = conj(G)
    try:
        L = np.linalg.cholesky(np.conj(Gr))
    except np.linalg.LinAlgError:
        X = np.linalg.lstsq(np.conj(Gr), M.T, rcond=None)[0].T
        return X, True
    # the pivot is ridge-dominated: the unregularised Gram is near singular
    ill = bool(np.min(np.abs(np.diag(L))) ** 2 < (1e-12 + 10.0 * ridge) * scale)
    y = np.linalg.solve(L, M.T)
    X = np.linalg.solve(L.conj().T, y).T
    return X, ill


def als_run(Y, A, B, C, max_iters, tol, ridge):
    """Alternating least squares for ``Y[i,j,k] ~ sum_r A[i,r] B[j,r] C[k,r]``.

    Columns of A and B are kept at unit norm, the scale lives in C.
    Returns ``(A, B, C, residuals, n_ill)`` where ``residuals[t]`` is the
    relative Frobenius residual after sweep t and ``n_ill`` counts
    ill-conditioned Gram solves.
    """
    I, J, K = Y.shape
    R = A.shape[1]
    A = np.array(A, dtype=complex)
    B = np.array(B, dtype=complex)
    C = np.array(C, dtype=complex)
    Y2 = Y.reshape(I * J, K)
    Y2t = np.ascontiguousarray(Y2.T)
    ynorm2 = float(np.vdot(Y2, Y2).real)
    res = []
    n_ill = 0
    if ynorm2 == 0.0:
        return A, B, np.zeros_like(C), np.zeros(1), 0

    for _ in range(max_iters):
        GC = C.T @ C.conj()
        W = (Y2 @ C.conj()).reshape(I, J, R)

        M1 = np.einsum("ijr,jr->ir", W, B.conj())
        A, ill = _solve_gram((B.T @ B.conj()) * GC, M1, ridge)
        n_ill += ill
        A /= np.maximum(np.linalg.norm(A, axis=0), 1e-300)

        M2 = np.einsum("ijr,ir->jr", W, A.conj())
        B, ill = _solve_gram((A.T @ A.conj()) * GC, M2, ridge)
        n_ill += ill
        B /= np.maximum(np.linalg.norm(B, axis=0), 1e-300)

        KR = (A[:, None, :] * B[None, :, :]).reshape(I * J, R)
        M3 = Y2t @ KR.conj()
        GAB = (A.T @ A.conj()) * (B.T @ B.conj())
        C, ill = _solve_gram(GAB, M3, ridge)
        n_ill += ill

        fit = 2.0 * np.sum(C * M3.conj()).real - np.sum(GAB * (C.T @ C.conj())).real
        rel2 = 1.0 - fit / ynorm2
        if rel2 < 1e-10:
            E = Y2 - KR @ C.T
            rel2 = float(np.vdot(E, E).real) / ynorm2
        r = np.sqrt(max(rel2, 0.0))
        res.append(r)
        if r < 1e-13:
            break
        if len(res) > 1 and res[-2] - r < tol * res[-2]:
            break
    return A, B, C, np.asarray(res), n_ill
