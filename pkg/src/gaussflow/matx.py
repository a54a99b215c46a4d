"""Dense small-matrix kernels: principal square root, Sylvester solves,
square-root derivatives and Gaussian log-densities.

The general routines (``principal_sqrt``, ``solve_sylvester``,
``sqrt_derivative``) accept a single matrix. The ``batched_*`` helpers work on
stacks of matrices with a leading batch axis and cover the special structure
the flow integrator produces: matrices diagonalisable with a real positive
spectrum.
"""

import numpy as np
import scipy.linalg as sla

from .errors import CovarianceError, SqrtDomainError, SylvesterSingularError

SYMMETRY_RTOL = 1e-12
_SQRT_RESIDUAL_LIMIT = 1e-8

LOG_2PI = np.log(2.0 * np.pi)


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def is_symmetric(A, rtol=SYMMETRY_RTOL):
    A = np.asarray(A, dtype=float)
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    return bool(np.max(np.abs(A - A.T)) <= rtol * scale)


def is_spd(A, rtol=SYMMETRY_RTOL):
    """True when ``A`` is symmetric to ``rtol`` and a Cholesky factorisation
    succeeds."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or not np.all(np.isfinite(A)):
        return False
    if not is_symmetric(A, rtol):
        return False
    try:
        np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    return True


def symmetrize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _triangular_sqrt(T):
    """Square root of an upper-triangular matrix by the column recurrence
    U_ii = sqrt(T_ii), U_ij = (T_ij - sum_k U_ik U_kj) / (U_ii + U_jj)."""
    n = T.shape[0]
    U = np.zeros_like(T)
    diag = np.sqrt(np.diag(T))
    U[np.diag_indices(n)] = diag
    for j in range(1, n):
        for i in range(j - 1, -1, -1):
            s = U[i, i + 1:j] @ U[i + 1:j, j]
            U[i, j] = (T[i, j] - s) / (diag[i] + diag[j])
    return U


def principal_sqrt(A):
    """Principal square root of a matrix whose eigenvalues have positive real
    part.

    Uses the real Schur form ``A = Z T Z^T``. When every eigenvalue is real
    ``T`` is upper triangular and the triangular recurrence runs in real
    arithmetic; otherwise the complex Schur form is used instead.

    Raises
    ------
    SqrtDomainError
        If some eigenvalue has non-positive real part, or the computed root
        fails to reproduce ``A``.
    """
    try:
        A = _as_square(A)
    except ValueError as exc:
        raise SqrtDomainError(str(exc)) from exc
    n = A.shape[0]
    if n == 1:
        if A[0, 0] <= 0:
            raise SqrtDomainError(f"scalar {A[0, 0]!r} has no principal square root")
        return np.sqrt(A)

    T, Z = sla.schur(A, output="real")
    sub = np.abs(np.diag(T, -1))
    if np.any(sub > 0):
        T, Z = sla.rsf2csf(T, Z)
    ev = np.diag(T)
    scale = np.max(np.abs(ev))
    if np.any(ev.real <= 1e-14 * scale) or scale == 0:
        raise SqrtDomainError(
            f"spectrum not in the open right half-plane (min real part {ev.real.min():.3e})"
        )
    U = _triangular_sqrt(T)
    S = Z @ U @ Z.conj().T
    if np.iscomplexobj(S):
        S = S.real
    res = np.linalg.norm(S @ S - A) / np.linalg.norm(A)
    if not np.isfinite(res) or res > _SQRT_RESIDUAL_LIMIT:
        raise SqrtDomainError(f"square-root recurrence did not converge (residual {res:.3e})")
    if is_symmetric(A):
        S = symmetrize(S)
    return S


def solve_sylvester(A, B, C):
    """Solve ``A X + X B = C`` by the Bartels-Stewart method.

    Raises
    ------
    SylvesterSingularError
        If an eigenvalue of ``A`` is (numerically) the negative of an
        eigenvalue of ``B``.
    """
    A = _as_square(A, "A")
    B = _as_square(B, "B")
    C = np.asarray(C, dtype=float)
    if C.ndim == 0:
        C = C.reshape(1, 1)
    if C.shape != (A.shape[0], B.shape[0]):
        raise ValueError(f"C has shape {C.shape}, expected {(A.shape[0], B.shape[0])}")
    ea = np.linalg.eigvals(A)
    eb = np.linalg.eigvals(B)
    gap = np.min(np.abs(ea[:, None] + eb[None, :]))
    scale = max(np.max(np.abs(ea)), np.max(np.abs(eb)), np.finfo(float).tiny)
    if gap <= 1e-12 * scale:
        raise SylvesterSingularError(f"spectra of A and -B overlap (gap {gap:.3e})")
    X = sla.solve_sylvester(A, B, C)
    if not np.all(np.isfinite(X)):
        raise SylvesterSingularError("Sylvester solve produced non-finite values")
    return X


def sqrt_derivative(A, dA):
    """Directional derivative of the principal square root: solves
    ``S dS + dS S = dA`` with ``S = principal_sqrt(A)``."""
    S = principal_sqrt(A)
    return solve_sylvester(S, S, dA)


def gaussian_logpdf(x, m, P):
    """Log-density of N(m, P) at ``x``.

    ``x`` may carry leading batch axes; ``m`` broadcasts against it.

    Raises
    ------
    ValueError
        On dimension mismatch.
    CovarianceError
        When ``P`` is not numerically positive definite.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim == 0:
        P = P.reshape(1, 1)
    x = np.asarray(x, dtype=float)
    m = np.asarray(m, dtype=float)
    d = P.shape[0]
    if P.shape != (d, d) or x.shape[-1:] != (d,) or m.shape[-1:] != (d,):
        raise ValueError(
            f"dimension mismatch: x {x.shape}, m {m.shape}, P {P.shape}"
        )
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance is not positive definite") from exc
    diag = np.diag(L)
    if np.min(diag) <= 1e-150 or not np.all(np.isfinite(diag)):
        raise CovarianceError("covariance is numerically singular")
    r = np.broadcast_to(x - m, np.broadcast_shapes(x.shape, m.shape))
    flat = r.reshape(-1, d).T
    z = sla.solve_triangular(L, flat, lower=True)
    quad = np.sum(z * z, axis=0).reshape(r.shape[:-1])
    out = -0.5 * quad - np.sum(np.log(diag)) - 0.5 * d * LOG_2PI
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# batched helpers


def batched_sym_sqrt(P):
    """Principal square roots of a stack of SPD matrices via ``eigh``.

    Returns ``(S, s, U)`` with ``S = U diag(s) U^T`` and ``s`` the square roots
    of the eigenvalues.
    """
    w, U = np.linalg.eigh(symmetrize(P))
    s = np.sqrt(np.clip(w, 0.0, None))
    S = (U * s[..., None, :]) @ np.swapaxes(U, -1, -2)
    return S, s, U


def batched_sylvester_eig(T, Tinv, s, C):
    """Solve ``S X + X S = C`` for ``S = T diag(s) T^{-1}`` (batched).

    In the eigenbasis the equation decouples entrywise:
    ``Xt_ab = Ct_ab / (s_a + s_b)`` with ``Ct = T^{-1} C T``.
    ``C`` may carry one extra axis before the matrix axes (several right-hand
    sides per batch element).
    """
    extra = C.ndim - T.ndim
    Te = T.reshape(T.shape[:-2] + (1,) * extra + T.shape[-2:])
    Ti = Tinv.reshape(Tinv.shape[:-2] + (1,) * extra + Tinv.shape[-2:])
    se = s.reshape(s.shape[:-1] + (1,) * extra + s.shape[-1:])
    Ct = Ti @ C @ Te
    Xt = Ct / (se[..., :, None] + se[..., None, :])
    return Te @ Xt @ Ti
