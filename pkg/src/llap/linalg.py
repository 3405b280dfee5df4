"""Cholesky-based dense linear algebra in float64.

Matrices are plain ``numpy`` arrays. Factorisations record the diagonal
jitter that had to be added so callers can surface it in reports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, IndexOutOfRange, NotPositiveDefinite, NotSquare, NotSymmetric

SYMMETRY_RTOL = 1e-10


def jitter_ladder(max_jitter):
    """Return ``[0, 1e-10, 1e-9, ...]`` truncated at ``max_jitter``."""
    ladder = [0.0]
    j = 1e-10
    while j <= max_jitter * (1 + 1e-12):
        ladder.append(j)
        j *= 10.0
    return ladder


def is_symmetric(M, rtol=SYMMETRY_RTOL):
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return False
    scale = 1.0 + (np.max(np.abs(M)) if M.size else 0.0)
    return bool(np.max(np.abs(M - M.T), initial=0.0) <= rtol * scale)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower factor ``L`` with ``L @ L.T == M + jitter * I``."""

    L: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self):
        return self.L.shape[0]


def cholesky(M, max_jitter=0.0):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSquare(f"expected a square matrix, got shape {M.shape}")
    if not is_symmetric(M):
        raise NotSymmetric("matrix is not symmetric within tolerance")
    n = M.shape[0]
    eye = np.eye(n)
    for jitter in jitter_ladder(max_jitter):
        try:
            L = np.linalg.cholesky(M + jitter * eye if jitter else M)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return CholeskyFactor(L, jitter)
    raise NotPositiveDefinite(f"Cholesky failed for every jitter up to {max_jitter:g}", max_jitter)


def log_det_psd(C):
    return float(2.0 * np.sum(np.log(np.diag(C.L))))


def solve(C, B):
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != C.dim:
        raise DimensionMismatch(f"factor has dimension {C.dim}, right-hand side has {B.shape[0]} rows")
    return sla.cho_solve((C.L, True), B, check_finite=False)


def quadratic_form(v, C):
    """``v^T (M + jitter I)^{-1} v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (C.dim,):
        raise DimensionMismatch(f"vector length {v.shape} does not match dimension {C.dim}")
    w = sla.solve_triangular(C.L, v, lower=True, check_finite=False)
    return float(w @ w)


def inverse_diagonal(C):
    Linv = sla.solve_triangular(C.L, np.eye(C.dim), lower=True, check_finite=False)
    return np.einsum("ij,ij->j", Linv, Linv)


def trace_of_inverse_block(C, indices):
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= C.dim):
        raise IndexOutOfRange(f"indices must lie in [0, {C.dim})")
    return float(np.sum(inverse_diagonal(C)[idx]))


class DiagPlusLowRank:
    """Factorised ``M = diag(d) + U^T U`` with ``U`` of shape (r, n).

    Uses the matrix determinant lemma and the Woodbury identity through the
    r x r capacitance matrix ``K = I + U D^{-1} U^T``, so every operation
    costs O(r^2 n + r^3) instead of O(n^3).
    """

    def __init__(self, d, U):
        d = np.asarray(d, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        if U.ndim != 2 or U.shape[1] != d.shape[0]:
            raise DimensionMismatch(f"factor shape {U.shape} incompatible with diagonal of length {d.shape[0]}")
        if np.any(d <= 0):
            raise NotPositiveDefinite("diagonal part must be strictly positive")
        self.d = d
        self.U = U
        self.UDinv = U / d
        K = np.eye(U.shape[0]) + self.UDinv @ U.T
        self.chol = cholesky(0.5 * (K + K.T))

    @property
    def dim(self):
        return self.d.shape[0]

    @property
    def jitter(self):
        return 0.0

    def log_det(self):
        return float(np.sum(np.log(self.d)) + log_det_psd(self.chol))

    def solve(self, B):
        B = np.asarray(B, dtype=np.float64)
        if B.shape[0] != self.dim:
            raise DimensionMismatch(f"dimension {self.dim} vs right-hand side rows {B.shape[0]}")
        DinvB = B / (self.d if B.ndim == 1 else self.d[:, None])
        inner = solve(self.chol, self.U @ DinvB)
        return DinvB - self.UDinv.T @ inner

    def inverse_diagonal(self):
        W = sla.solve_triangular(self.chol.L, self.UDinv, lower=True, check_finite=False)
        return 1.0 / self.d - np.einsum("ij,ij->j", W, W)

    def absorbed_diagonal(self):
        """``1 - d_i (M^{-1})_ii``, computed without cancellation."""
        W = sla.solve_triangular(self.chol.L, self.UDinv, lower=True, check_finite=False)
        return self.d * np.einsum("ij,ij->j", W, W)

    def block_sq_sums(self, blocks):
        """``S[b, c] = sum over i in b, j in c of (M^{-1})_ij^2``."""
        W = sla.solve_triangular(self.chol.L, self.UDinv, lower=True, check_finite=False)
        w2 = np.einsum("ij,ij->j", W, W)
        G = np.stack([W[:, b] @ W[:, b].T for b in blocks])
        S = np.einsum("bij,cij->bc", G, G)
        S[np.diag_indices_from(S)] += [np.sum(1.0 / self.d[b] ** 2 - 2.0 * w2[b] / self.d[b]) for b in blocks]
        return S

    def sandwich(self, A):
        """``A M^{-1} A^T`` for ``A`` of shape (m, n)."""
        A = np.asarray(A, dtype=np.float64)
        ADinv = A / self.d
        W = sla.solve_triangular(self.chol.L, self.UDinv @ A.T, lower=True, check_finite=False)
        S = ADinv @ A.T - W.T @ W
        return 0.5 * (S + S.T)
