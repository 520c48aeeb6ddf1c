"""Dense real kernels: complex-to-real expansion, Householder QL, residuals.

Matrices and vectors are plain ``numpy.ndarray`` objects in float64. The
QL kernel works on stacks of matrices (``(..., m, n)``) so that training
can factor a whole mini-batch of channels in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# |l_kk| below this fraction of ||H||_F marks a numerically singular channel.
RANK_TOL = 1e-12


@dataclass(frozen=True)
class QLFactors:
    """Reduced QL factors of a tall real matrix, ``H = Q @ L``.

    ``Q`` has orthonormal columns (``rows x cols``) and ``L`` is square lower
    triangular with a non-negative diagonal.
    """

    Q: np.ndarray
    L: np.ndarray
    rank_deficient: bool = False


def _as_real_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _as_real_vector(a, name: str = "vector") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def complex_to_real_matrix(Hc) -> np.ndarray:
    """Map ``(..., N_R, N_T)`` complex matrices to ``(..., 2N_R, 2N_T)`` real ones."""
    Hc = np.asarray(Hc, dtype=np.complex128)
    re, im = Hc.real, Hc.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def complex_to_real_vector(vc) -> np.ndarray:
    vc = np.asarray(vc, dtype=np.complex128)
    return np.concatenate([vc.real, vc.imag], axis=-1)


def complex_to_real(Hc, yc, sc):
    """Real-valued equivalent ``(H, y, s)`` of a complex MIMO instance."""
    Hc = np.asarray(Hc, dtype=np.complex128)
    yc = np.asarray(yc, dtype=np.complex128)
    sc = np.asarray(sc, dtype=np.complex128)
    if Hc.ndim != 2 or yc.ndim != 1 or sc.ndim != 1:
        raise ValueError("expected a matrix and two vectors")
    n_r, n_t = Hc.shape
    if yc.shape[0] != n_r or sc.shape[0] != n_t:
        raise ValueError(
            f"dimension mismatch: H is {n_r}x{n_t}, y has {yc.shape[0]}, s has {sc.shape[0]}"
        )
    return complex_to_real_matrix(Hc), complex_to_real_vector(yc), complex_to_real_vector(sc)


def householder_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced Householder QR of a stack of tall matrices.

    Returns ``(Q, R)`` with ``Q`` of shape ``(..., m, n)`` and ``R`` upper
    triangular ``(..., n, n)``. No sign normalisation is applied.
    """
    A = np.asarray(A, dtype=np.float64)
    *batch, m, n = A.shape
    if m < n:
        raise ValueError(f"QR needs rows >= cols, got {m}x{n}")
    R = A.reshape(-1, m, n).copy()
    nb = R.shape[0]
    vs = []
    betas = []
    for j in range(n):
        x = R[:, j:, j]
        norm = np.sqrt(np.einsum("bi,bi->b", x, x))
        sign = np.where(x[:, 0] >= 0.0, 1.0, -1.0)
        v = x.copy()
        v[:, 0] += sign * norm
        vv = np.einsum("bi,bi->b", v, v)
        safe = vv > 0.0
        beta = np.where(safe, 2.0 / np.where(safe, vv, 1.0), 0.0)
        w = np.einsum("bi,bij->bj", v, R[:, j:, j:])
        R[:, j:, j:] -= (beta[:, None, None] * v[:, :, None]) * w[:, None, :]
        vs.append(v)
        betas.append(beta)

    Q = np.zeros((nb, m, n))
    Q[:, np.arange(n), np.arange(n)] = 1.0
    for j in reversed(range(n)):
        v, beta = vs[j], betas[j]
        w = np.einsum("bi,bij->bj", v, Q[:, j:, :])
        Q[:, j:, :] -= (beta[:, None, None] * v[:, :, None]) * w[:, None, :]

    R = np.triu(R[:, :n, :])
    return Q.reshape(*batch, m, n), R.reshape(*batch, n, n)


def ql_decompose_batch(H: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """QL of a stack ``(..., m, n)``; returns ``(Q, L, rank_deficient)``.

    Computed as the QR of the row- and column-reversed matrix, then reversed
    back. Columns of ``Q`` are sign-flipped so that ``diag(L) >= 0``.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim < 2:
        raise ValueError("expected at least a 2-D array")
    if not np.all(np.isfinite(H)):
        raise ValueError("channel matrix has non-finite entries")
    Qr, Rr = householder_qr(H[..., ::-1, ::-1])
    Q = Qr[..., ::-1, ::-1]
    L = Rr[..., ::-1, ::-1]
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    sign = np.where(diag < 0.0, -1.0, 1.0)
    Q = np.ascontiguousarray(Q * sign[..., None, :])
    L = np.tril(L * sign[..., :, None])
    # tril leaves -0.0 where a flipped zero sat; normalise to +0.0
    L = L + 0.0
    fro = np.sqrt(np.sum(H * H, axis=(-2, -1)))
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    flagged = np.any(diag <= RANK_TOL * fro[..., None], axis=-1)
    return Q, L, flagged


def ql_decompose(H) -> QLFactors:
    """QL factors of one real matrix with ``rows >= cols``."""
    H = _as_real_matrix(H, "H")
    Q, L, flagged = ql_decompose_batch(H)
    return QLFactors(Q=Q, L=L, rank_deficient=bool(flagged))


def rotate_observation(Q, y) -> np.ndarray:
    """``Q^T y``: the observation expressed in the triangular system."""
    Q = _as_real_matrix(Q, "Q")
    y = _as_real_vector(y, "y")
    if Q.shape[0] != y.shape[0]:
        raise ValueError(f"Q has {Q.shape[0]} rows but y has length {y.shape[0]}")
    return Q.T @ y


def residual_metric(y, H, s) -> float:
    """Squared Euclidean residual ``||y - H s||^2``."""
    H = _as_real_matrix(H, "H")
    y = _as_real_vector(y, "y")
    s = _as_real_vector(s, "s")
    if H.shape != (y.shape[0], s.shape[0]):
        raise ValueError(f"dimension mismatch: H {H.shape}, y {y.shape}, s {s.shape}")
    r = y - H @ s
    return float(r @ r)


def residual_metric_batch(y: np.ndarray, H: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Row-wise ``||y_b - H_b s_b||^2`` for stacked instances."""
    r = y - np.einsum("bij,bj->bi", H, s)
    return np.einsum("bi,bi->b", r, r)
