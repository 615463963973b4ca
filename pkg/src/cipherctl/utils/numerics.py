"""Rank and pseudo-inverse helpers sharing one tolerance rule."""

import numpy as np
import scipy.linalg


def rank_tolerance(singular_values: np.ndarray, shape: tuple[int, ...]) -> float:
    """Cut-off below which a singular value counts as zero."""
    if singular_values.size == 0:
        return 0.0
    return max(shape) * np.finfo(np.float64).eps * float(singular_values.max())


def numerical_rank(matrix: np.ndarray) -> int:
    """Numerical rank with the max-dimension * eps * sigma_max rule."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.size == 0:
        return 0
    sv = scipy.linalg.svd(matrix, compute_uv=False)
    return int(np.sum(sv > rank_tolerance(sv, matrix.shape)))


def pinv(matrix: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse with the shared rank cut-off."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    u, sv, vt = scipy.linalg.svd(matrix, full_matrices=False)
    keep = sv > rank_tolerance(sv, matrix.shape)
    inv = np.zeros_like(sv)
    inv[keep] = 1.0 / sv[keep]
    return (vt.T * inv) @ u.T


def split_range(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Split the SVD of a matrix into its range and kernel parts.

    Returns:
        (E, Sigma, F, F_perp): left singular vectors of the range, the nonzero singular
        values, right singular vectors of the co-range and an orthonormal kernel basis.
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    u, sv, vt = scipy.linalg.svd(matrix, full_matrices=True)
    rank = int(np.sum(sv > rank_tolerance(sv, matrix.shape)))
    return u[:, :rank], sv[:rank], vt[:rank].T, vt[rank:].T
