"""Dense linear-algebra kernels shared by the simulator.

Everything here is a pure function of float64 numpy arrays. Sign conventions
are fixed (positive ``R`` diagonal, largest-magnitude eigenvector entry
positive) so that repeated runs produce identical bits.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class NumericsError(ValueError):
    """Base class for numerical failures raised by this module."""


class RankDeficientError(NumericsError):
    def __init__(self, column: int, message: str | None = None):
        self.column = column
        super().__init__(message or f"matrix is rank deficient at column {column}")


class SingularMatrixError(NumericsError):
    def __init__(self, min_eigenvalue: float, message: str | None = None):
        self.min_eigenvalue = float(min_eigenvalue)
        super().__init__(
            message
            or f"matrix is numerically singular (smallest eigenvalue {min_eigenvalue:.3e})"
        )


class NotOrthonormalError(NumericsError):
    pass


class EigResult(NamedTuple):
    vectors: np.ndarray
    values: np.ndarray
    gap_warning: bool


RANK_TOL = 1e-12
SYMMETRY_TOL = 1e-10
ORTHONORMAL_TOL = 1e-8


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _check_symmetric(S: np.ndarray, name: str) -> None:
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise ValueError(f"{name} is not symmetric within {SYMMETRY_TOL}")


def qr_orthonormalize(A) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR factorisation with a positive diagonal on ``R``.

    Parameters
    ----------
    A : array_like, shape (d, k)
        Full column rank, ``d >= k``.

    Returns
    -------
    Q : ndarray, shape (d, k)
        Orthonormal columns spanning ``range(A)``.
    R : ndarray, shape (k, k)
        Upper triangular, strictly positive diagonal, ``A = Q @ R``.

    Raises
    ------
    RankDeficientError
        If a diagonal entry of ``R`` is negligible; ``.column`` names it.
    """
    A = _as_matrix(A, "A")
    d, k = A.shape
    if d < k:
        raise ValueError(f"need d >= k, got shape {A.shape}")
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.diag(R)
    col_norms = np.linalg.norm(A, axis=0)
    scale = max(float(np.max(col_norms, initial=0.0)), np.finfo(float).tiny)
    for j in range(k):
        if abs(diag[j]) <= RANK_TOL * scale:
            raise RankDeficientError(j)
    signs = np.where(diag < 0, -1.0, 1.0)
    Q = Q * signs
    R = R * signs[:, None]
    return Q, R


def top_k_eigvecs(S, k: int) -> EigResult:
    """Leading ``k`` eigenpairs of a symmetric PSD matrix.

    Eigenvalues come back in non-increasing order. Each eigenvector is
    flipped so its largest-magnitude entry is positive. ``gap_warning`` is
    set when the k-th and (k+1)-th eigenvalues coincide within 1e-12, in
    which case the returned subspace is not uniquely determined.
    """
    S = _as_matrix(S, "S")
    _check_symmetric(S, "S")
    p = S.shape[0]
    if not 1 <= k <= p:
        raise ValueError(f"need 1 <= k <= {p}, got k={k}")
    S = 0.5 * (S + S.T)
    values, vectors = np.linalg.eigh(S)
    values = values[::-1]
    vectors = vectors[:, ::-1]
    top = vectors[:, :k].copy()
    for j in range(k):
        idx = int(np.argmax(np.abs(top[:, j])))
        if top[idx, j] < 0:
            top[:, j] = -top[:, j]
    gap_warning = bool(k < p and abs(values[k - 1] - values[k]) <= 1e-12)
    return EigResult(top, values[:k].copy(), gap_warning)


def solve_spd(H, b, ridge: float = 0.0) -> np.ndarray:
    """Solve ``(H + ridge*I) x = b`` for symmetric positive definite ``H``.

    Raises SingularMatrixError carrying the smallest eigenvalue when the
    regularised matrix is numerically singular or indefinite.
    """
    H = _as_matrix(H, "H")
    _check_symmetric(H, "H")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    b = np.asarray(b, dtype=np.float64)
    k = H.shape[0]
    if b.shape[0] != k:
        raise ValueError(f"b has length {b.shape[0]}, expected {k}")
    Hr = 0.5 * (H + H.T) + ridge * np.eye(k)
    eigs = np.linalg.eigvalsh(Hr)
    lam_min, lam_max = float(eigs[0]), float(eigs[-1])
    if lam_max <= 0 or lam_min <= k * np.finfo(float).eps * lam_max:
        raise SingularMatrixError(lam_min)
    L = np.linalg.cholesky(Hr)
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


def condition_number(H) -> float:
    """Spectral condition number of a symmetric matrix (inf if not PD)."""
    eigs = np.linalg.eigvalsh(0.5 * (np.asarray(H) + np.asarray(H).T))
    if eigs[0] <= 0:
        return float("inf")
    return float(eigs[-1] / eigs[0])


def row_dot(F, W) -> np.ndarray:
    """Row-wise dot product over the last axis with a fixed summation order.

    ``W`` broadcasts against ``F``. Every score in the package goes through
    this helper, so the generator's labels and a model holding the true
    parameters agree bit for bit.
    """
    F = np.asarray(F, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    acc = F[..., 0] * W[..., 0]
    for j in range(1, F.shape[-1]):
        acc = acc + F[..., j] * W[..., j]
    return acc


def is_orthonormal(A, tol: float = ORTHONORMAL_TOL) -> bool:
    A = np.asarray(A, dtype=np.float64)
    k = A.shape[1]
    return bool(np.max(np.abs(A.T @ A - np.eye(k)), initial=0.0) <= tol)


def principal_angle_dist(A, B) -> float:
    """Principal angle distance ``||A_perp^T B||_2`` between column spans.

    Both inputs must have orthonormal columns. The value is the largest
    singular value of ``(I - A A^T) B``, i.e. the sine of the largest
    principal angle, so it lies in ``[0, 1]``.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    for name, M in (("A", A), ("B", B)):
        if not is_orthonormal(M):
            raise NotOrthonormalError(f"{name} does not have orthonormal columns")
    resid = B - A @ (A.T @ B)
    val = float(np.linalg.norm(resid, ord=2))
    return min(max(val, 0.0), 1.0)
