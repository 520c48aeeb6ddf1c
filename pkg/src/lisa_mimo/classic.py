"""Baseline detectors: ZF, MMSE, ZF-DF, exhaustive ML and a Schnorr-Euchner
sphere decoder.

Single-instance functions take one real channel / observation. The
``*_batch`` variants take stacks with a leading instance axis and return
alphabet *indices*, which is what the BER harness consumes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .linalg import QLFactors
from .modem import Constellation, nearest_index, slice_to_alphabet

DEFAULT_MLD_BUDGET = 2 ** 24


class DegenerateChannelError(ValueError):
    """The channel has a zero (or singular) direction the detector cannot invert."""


class ComplexityBudgetError(ValueError):
    pass


def _normal_solve(G: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(G, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise DegenerateChannelError(f"normal equations are singular: {exc}") from exc


def zf_estimate(H: np.ndarray, y: np.ndarray) -> np.ndarray:
    Ht = np.swapaxes(H, -1, -2)
    return _normal_solve(Ht @ H, np.einsum("...ij,...j->...i", Ht, y))


def mmse_estimate(H: np.ndarray, y: np.ndarray, noise_var, symbol_var: float) -> np.ndarray:
    Ht = np.swapaxes(H, -1, -2)
    n = H.shape[-1]
    reg = np.asarray(noise_var, dtype=np.float64) / symbol_var
    G = Ht @ H + reg[..., None, None] * np.eye(n)
    return _normal_solve(G, np.einsum("...ij,...j->...i", Ht, y))


def zf_detect(H_hat, y, c: Constellation) -> np.ndarray:
    return slice_to_alphabet(c, zf_estimate(np.asarray(H_hat, float), np.asarray(y, float)))


def mmse_detect(H_hat, y, c: Constellation, noise_var: float) -> np.ndarray:
    if noise_var < 0:
        raise ValueError("noise variance must be >= 0")
    est = mmse_estimate(np.asarray(H_hat, float), np.asarray(y, float), noise_var, c.symbol_variance)
    return slice_to_alphabet(c, est)


def zfdf_indices(L: np.ndarray, y_tilde: np.ndarray, c: Constellation) -> np.ndarray:
    """Successive cancellation down the lower-triangular system (stack-aware)."""
    L = np.asarray(L, dtype=np.float64)
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise DegenerateChannelError("L has a non-positive diagonal entry")
    n = L.shape[-1]
    idx = np.zeros(y_tilde.shape, dtype=np.int64)
    s = np.zeros(y_tilde.shape)
    for k in range(n):
        centre = (y_tilde[..., k] - np.einsum("...j,...j->...", L[..., k, :k], s[..., :k])) / L[..., k, k]
        idx[..., k] = nearest_index(c, centre)
        s[..., k] = c.alphabet[idx[..., k]]
    return idx


def zfdf_detect(ql: QLFactors, y_tilde, c: Constellation) -> np.ndarray:
    return c.alphabet[zfdf_indices(ql.L, y_tilde, c)]


def candidate_indices(M: int, n: int) -> np.ndarray:
    """All ``M**n`` index vectors in lexicographic order (first symbol most significant)."""
    return np.array(list(itertools.product(range(M), repeat=n)), dtype=np.int64).reshape(-1, n)


def mld_indices(H: np.ndarray, y: np.ndarray, c: Constellation,
                budget: int = DEFAULT_MLD_BUDGET, chunk: int = 4096) -> np.ndarray:
    """Exhaustive ML over a stack ``H (B, m, n)``, ``y (B, m)``; returns ``(B, n)`` indices."""
    H = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = H.shape[-1]
    total = c.M ** n
    if total > budget:
        raise ComplexityBudgetError(
            f"MLD needs {c.M}^{n} = {total} candidates, over the budget of {budget}"
        )
    cands = candidate_indices(c.M, n)
    S = c.alphabet[cands].T  # (n, K)
    best = np.full(H.shape[0], np.inf)
    best_k = np.zeros(H.shape[0], dtype=np.int64)
    for start in range(0, total, chunk):
        block = S[:, start:start + chunk]
        r = y[:, :, None] - H @ block
        obj = np.einsum("bik,bik->bk", r, r)
        k = np.argmin(obj, axis=1)
        val = obj[np.arange(len(k)), k]
        # strict improvement keeps the lexicographically first minimiser
        better = val < best
        best[better] = val[better]
        best_k[better] = k[better] + start
    return cands[best_k]


def mld_detect(H_hat, y, c: Constellation, budget: int = DEFAULT_MLD_BUDGET) -> np.ndarray:
    H_hat = np.asarray(H_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if H_hat.ndim != 2 or y.shape != (H_hat.shape[0],):
        raise ValueError(f"dimension mismatch: H {H_hat.shape}, y {y.shape}")
    return c.alphabet[mld_indices(H_hat[None], y[None], c, budget)[0]]


@dataclass
class SphereResult:
    indices: np.ndarray
    metric: float
    nodes: int


def sphere_search(L: np.ndarray, y_tilde: np.ndarray, c: Constellation) -> SphereResult:
    """Depth-first Schnorr-Euchner enumeration with an initially infinite radius.

    ``nodes`` counts evaluated child metrics. Ties on the final metric go to
    the lexicographically smaller index vector, matching ``mld_detect``.
    """
    L = np.asarray(L, dtype=np.float64)
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    n = L.shape[0]
    if np.any(np.diag(L) <= 0):
        raise DegenerateChannelError("L has a non-positive diagonal entry")
    a = c.alphabet
    M = len(a)

    s = np.zeros(n)
    idx = [0] * n
    cum = [0.0] * (n + 1)
    metrics = [None] * n
    orders = [None] * n
    pos = [0] * n
    best = np.inf
    best_idx: tuple | None = None
    nodes = 0

    def enter(k):
        nonlocal nodes
        centre = y_tilde[k] - L[k, :k] @ s[:k]
        f = (centre - L[k, k] * a) ** 2
        metrics[k] = f
        orders[k] = np.argsort(f, kind="stable")
        pos[k] = 0
        nodes += M

    k = 0
    enter(0)
    while k >= 0:
        if pos[k] == M:
            k -= 1
            continue
        j = int(orders[k][pos[k]])
        pos[k] += 1
        total = cum[k] + float(metrics[k][j])
        if total > best:
            # children are sorted, so every remaining sibling is worse too
            pos[k] = M
            continue
        idx[k] = j
        s[k] = a[j]
        if k == n - 1:
            cand = tuple(idx)
            if total < best or best_idx is None or cand < best_idx:
                best, best_idx = total, cand
            continue
        cum[k + 1] = total
        k += 1
        enter(k)
    return SphereResult(indices=np.array(best_idx, dtype=np.int64), metric=float(best), nodes=nodes)


def sphere_detect(ql: QLFactors, y_tilde, c: Constellation) -> np.ndarray:
    return c.alphabet[sphere_search(ql.L, y_tilde, c).indices]


def sphere_indices(L: np.ndarray, y_tilde: np.ndarray, c: Constellation) -> np.ndarray:
    return np.stack([sphere_search(L[b], y_tilde[b], c).indices for b in range(L.shape[0])])
