"""Deterministic dense linear-algebra kernels.

Everything downstream (decomposition, cover construction, the basis
optimizer) is built on the four operations here. All kernels compute in
64-bit floats regardless of the precision tensors were stored in, and all
are pure: identical inputs give bitwise-identical outputs within a process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError, ValidationError

__all__ = [
    "SvdTriplet",
    "as_matrix",
    "truncated_svd",
    "whiten",
    "matrix_exp_skew",
    "orthogonal_complement_sample",
]

_ORTHO_TOL = 1e-8


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite float64 C-contiguous 2-D array.

    Parameters
    ----------
    a : array_like
        Anything numpy can interpret as a matrix.
    name : str
        Label used in error messages.

    Raises
    ------
    ValidationError
        If the value is not 2-D or contains NaN/Inf entries.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def _sign_normalize(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip (U[:,j], V[:,j]) pairs so each U column's largest-|.| entry is positive.

    Ties are broken by the lowest row index (argmax returns the first hit).
    Flipping both sides of a pair leaves U diag(s) V^T unchanged, so this is
    a pure gauge fix that makes factorizations reproducible.
    """
    idx = np.argmax(np.abs(U), axis=0)
    flip = U[idx, np.arange(U.shape[1])] < 0
    if np.any(flip):
        U = U.copy()
        V = V.copy()
        U[:, flip] *= -1.0
        V[:, flip] *= -1.0
    return U, V


@dataclass(frozen=True)
class SvdTriplet:
    """Rank-r factor triplet (U, sigma, V) with deterministic column signs.

    U is m x r and V is n x r with orthonormal columns; sigma is
    non-negative and non-increasing. On construction the columns are
    sign-normalized (largest-magnitude entry of each U column positive,
    V flipped jointly) and the arrays are frozen read-only.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        U = as_matrix(self.U, "U").copy()
        V = as_matrix(self.V, "V").copy()
        sigma = np.array(self.sigma, dtype=np.float64)
        if sigma.ndim != 1:
            raise ValidationError("sigma must be a 1-D vector")
        if not np.all(np.isfinite(sigma)):
            raise ValidationError("sigma contains non-finite entries")
        r = sigma.size
        if U.shape[1] != r or V.shape[1] != r:
            raise ValidationError(
                f"rank mismatch: U has {U.shape[1]} columns, V has "
                f"{V.shape[1]}, sigma has {r} entries"
            )
        if np.any(sigma < 0):
            raise ValidationError("sigma entries must be non-negative")
        if np.any(np.diff(sigma) > 0):
            raise ValidationError("sigma must be sorted non-increasing")
        for mat, label in ((U, "U"), (V, "V")):
            gram = mat.T @ mat
            if np.abs(gram - np.eye(r)).max() > _ORTHO_TOL:
                raise ValidationError(f"{label} columns are not orthonormal")
        U, V = _sign_normalize(U, V)
        for arr in (U, sigma, V):
            arr.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "V", V)

    @property
    def rank(self) -> int:
        return self.sigma.size


def truncated_svd(M, r: int) -> SvdTriplet:
    """Best rank-r approximation factors of a dense matrix.

    Parameters
    ----------
    M : array_like, shape (m, n)
    r : int
        Number of leading singular triplets to keep, 1 <= r <= min(m, n).

    Returns
    -------
    SvdTriplet
        U diag(sigma) V^T is the closest rank-r matrix to M in Frobenius
        norm, with the package sign convention applied.
    """
    M = as_matrix(M, "M")
    m, n = M.shape
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= min(m, n):
        raise ValidationError(
            f"rank must be an integer in [1, {min(m, n)}], got {r!r}"
        )
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from None
    return SvdTriplet(U[:, :r], s[:r], Vt[:r].T)


def whiten(M) -> np.ndarray:
    """Polar orthonormal factor: the closest matrix with orthonormal columns.

    With thin SVD M = P S Q^T the result is P Q^T. Among all d x k matrices
    with orthonormal columns it maximizes trace(W^T M). For rank-deficient
    input the factor is not unique; the output is then whatever the
    deterministic SVD routine yields, which is reproducible but arbitrary
    in the null directions.
    """
    M = as_matrix(M, "M")
    d, k = M.shape
    if d < k:
        raise ValidationError(f"whiten needs d >= k, got shape {M.shape}")
    P, _, Qt = np.linalg.svd(M, full_matrices=False)
    return P @ Qt


def matrix_exp_skew(A) -> np.ndarray:
    """Orthogonal matrix exp(A - A^T) for a square input A."""
    A = as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ValidationError(f"square matrix required, got shape {A.shape}")
    return scipy.linalg.expm(A - A.T)


def orthogonal_complement_sample(U, count: int, seed: int) -> np.ndarray:
    """Sample an orthonormal basis of ``count`` directions orthogonal to U.

    Draws a Gaussian block with the seeded generator, projects out the span
    of U, and orthonormalizes (twice, for numerical cleanliness). The output
    is deterministic for a given (U, count, seed).
    """
    U = as_matrix(U, "U")
    d, r = U.shape
    if count < 1:
        raise ValidationError("count must be at least 1")
    if r + count > d:
        raise ValidationError(
            f"ambient dimension too small: need {r}+{count} <= {d}"
        )
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((d, count))
    for _ in range(2):
        G = G - U @ (U.T @ G)
        G, R = np.linalg.qr(G)
        # canonicalize QR signs so the sample is stable
        signs = np.sign(np.diag(R))
        signs[signs == 0] = 1.0
        G = G * signs
    if np.abs(U.T @ G).max() > _ORTHO_TOL:
        raise NumericalError("complement sample failed orthogonality check")
    return G
