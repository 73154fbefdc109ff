import logging
from typing import Tuple

import numpy as np
from scipy import linalg as sla

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-12


class LinalgError(Exception):
    pass


class SingularMatrixError(LinalgError):
    def __init__(self, message: str, pivot_index: int = None):
        super().__init__(message)
        self.pivot_index = pivot_index


def as_matrix(data, name: str = 'matrix') -> np.ndarray:
    """Coerce to a finite 2-D float array (the dense matrix type used everywhere)."""
    arr = np.array(data, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise LinalgError('%s must be 2-D, got %d dims' % (name, arr.ndim))
    if not np.all(np.isfinite(arr)):
        raise LinalgError('%s has non-finite entries' % name)
    return arr


def as_vector(data, name: str = 'vector') -> np.ndarray:
    arr = np.array(data, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise LinalgError('%s has non-finite entries' % name)
    return arr


def lu_checked(M: np.ndarray):
    """Partial-pivot LU of a square matrix, rejecting pivots below PIVOT_TOL."""
    M = as_matrix(M, 'M')
    if M.shape[0] != M.shape[1]:
        raise LinalgError('M must be square, got %dx%d' % M.shape)
    lu, piv = sla.lu_factor(M, check_finite=False)
    pivots = np.abs(np.diag(lu))
    bad = np.flatnonzero(pivots <= PIVOT_TOL)
    if bad.size:
        raise SingularMatrixError('M not invertible: pivot %d is %.3g' % (bad[0], pivots[bad[0]]),
                                  pivot_index=int(bad[0]))
    return lu, piv


def solve_for_explicit(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Return Btilde = M^-1 B, checked by the residual ||M Btilde - B||_inf."""
    B = as_matrix(B, 'B')
    lu, piv = lu_checked(M)
    if B.shape[0] != lu.shape[0]:
        raise LinalgError('B has %d rows, M is %dx%d' % (B.shape[0], lu.shape[0], lu.shape[0]))
    Bt = sla.lu_solve((lu, piv), B, check_finite=False)
    resid = np.max(np.abs(np.asarray(M) @ Bt - B)) if B.size else 0.0
    scale = 1.0 + (np.max(np.abs(B).sum(axis=1)) if B.size else 0.0)
    if resid > 1e-8 * scale:
        logger.warning('solve_for_explicit residual %.3g exceeds tolerance', resid)
    return Bt


def spectral_norm(M: np.ndarray, tol: float = 1e-10, max_iter: int = 10000) -> float:
    """Largest singular value by power iteration on M^T M."""
    M = as_matrix(M, 'M')
    if not M.size or not np.any(M):
        return 0.0
    G = M.T @ M
    # deterministic start that is not orthogonal to the dominant vector in practice
    v = np.ones(G.shape[0]) + np.linspace(0.0, 0.5, G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        gv = G @ v
        nrm = np.linalg.norm(gv)
        if nrm == 0.0:
            return 0.0
        v = gv / nrm
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    return float(np.sqrt(max(lam, 0.0)))


def interval_affine(Btilde: np.ndarray, ylo, yhi) -> Tuple[np.ndarray, np.ndarray]:
    """Tight box image of y -> Btilde y over [ylo, yhi]."""
    B = np.asarray(Btilde, dtype=float)
    ylo = np.asarray(ylo, dtype=float)
    yhi = np.asarray(yhi, dtype=float)
    if np.any(ylo > yhi):
        raise LinalgError('interval_affine: ylo > yhi')
    mid = B @ (yhi + ylo)
    rad = np.abs(B) @ (yhi - ylo)
    return 0.5 * (mid - rad), 0.5 * (mid + rad)


def vertex_for_bound(Btilde: np.ndarray, ylo, yhi, row: int, upper: bool = True) -> np.ndarray:
    """Box vertex attaining the upper (or lower) bound of row `row`."""
    a = np.asarray(Btilde, dtype=float)[row]
    pick_hi = a >= 0 if upper else a < 0
    return np.where(pick_hi, yhi, ylo)
