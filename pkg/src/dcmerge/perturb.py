"""Controlled perturbations of a decomposition's spectrum and directions.

Both perturbations take a parameter p in [0, 1] that sets how much of the
original structure survives: p = 1 returns the input unchanged, p = 0
replaces it entirely (with a reference spectrum, or with directions drawn
from the orthogonal complement). They exist so that merging behavior can
be probed under known, graded amounts of damage.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError, ValidationError
from .linalg import SvdTriplet, orthogonal_complement_sample
from .task_vector import KnowledgeDecomposition

__all__ = ["energy_perturb", "direction_perturb"]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def energy_perturb(
    sigma: np.ndarray,
    p: float,
    sigma_ref: np.ndarray | None = None,
    fallback_seed: int | None = None,
) -> np.ndarray:
    """Rotate the spectrum toward a reference while preserving its norm.

    The result is ||sigma|| * (p * s + sqrt(1 - p^2) * s_perp) where s is
    the unit spectrum and s_perp is the unit component of ``sigma_ref``
    orthogonal to s (default reference: the flat spectrum mean(sigma) * 1).
    By construction the output has the same Euclidean norm as the input
    and cosine exactly p against it.

    When the reference is parallel to the spectrum there is no orthogonal
    component to rotate toward; with ``fallback_seed`` set, a seeded
    Gaussian direction is projected and used instead, otherwise this is
    reported as a NumericalError.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.size == 0:
        raise ValidationError("sigma must be a non-empty 1-D array")
    if not np.all(np.isfinite(sigma)):
        raise ValidationError("sigma must be finite")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p must be in [0, 1], got {p}")
    norm = np.linalg.norm(sigma)
    if norm == 0.0:
        raise NumericalError("cannot perturb an all-zero spectrum")
    s = sigma / norm

    if sigma_ref is None:
        ref = np.full_like(sigma, float(np.mean(sigma)))
    else:
        ref = np.asarray(sigma_ref, dtype=np.float64)
        if ref.shape != sigma.shape:
            raise ValidationError(
                f"sigma_ref shape {ref.shape} does not match sigma {sigma.shape}"
            )
        if not np.all(np.isfinite(ref)):
            raise ValidationError("sigma_ref must be finite")

    resid = ref - (ref @ s) * s
    ref_scale = max(np.linalg.norm(ref), 1.0)
    if np.linalg.norm(resid) < 1e-8 * ref_scale:
        if fallback_seed is None:
            raise NumericalError(
                "reference spectrum is parallel to sigma; no rotation "
                "direction exists (pass fallback_seed to draw one)"
            )
        rng = np.random.default_rng(fallback_seed)
        for _ in range(8):
            g = rng.standard_normal(sigma.size)
            resid = g - (g @ s) * s
            if np.linalg.norm(resid) >= 1e-8:
                break
        else:
            raise NumericalError("failed to draw a direction orthogonal to sigma")
    s_perp = _unit(resid)
    return norm * (p * s + np.sqrt(1.0 - p * p) * s_perp)


def direction_perturb(
    kd: KnowledgeDecomposition, p: float, seed: int
) -> KnowledgeDecomposition:
    """Blend singular directions with fresh orthogonal-complement ones.

    Each side is replaced by sqrt(p) * original + sqrt(1 - p) * complement,
    where the complement columns are orthonormal and orthogonal to the
    originals, so the blended columns stay orthonormal without any
    re-orthogonalization. The directional similarity between the input and
    the output is exactly p (every original dyad overlaps its blended
    counterpart by sqrt(p) on each side and the cross terms vanish).

    Needs ambient room for the complements: m >= 2r and n >= 2r.
    """
    if not isinstance(kd, KnowledgeDecomposition):
        raise ValidationError("kd must be a KnowledgeDecomposition")
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"p must be in [0, 1], got {p}")
    m, n = kd.source_shape
    r = kd.rank
    if m < 2 * r or n < 2 * r:
        raise ValidationError(
            f"ambient dimension too small to host a rank-{r} complement: "
            f"shape ({m}, {n})"
        )
    seeds = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    U_perp = orthogonal_complement_sample(kd.U, r, int(seeds[0]))
    V_perp = orthogonal_complement_sample(kd.V, r, int(seeds[1]))
    root_p = np.sqrt(p)
    root_q = np.sqrt(1.0 - p)
    U_new = root_p * kd.U + root_q * U_perp
    V_new = root_p * kd.V + root_q * V_perp
    triplet = SvdTriplet(U=U_new, sigma=kd.sigma, V=V_new)
    return KnowledgeDecomposition(svd=triplet, source_shape=kd.source_shape)
