"""Similarity and alignment metrics between task vectors and merges.

The directional-overlap matrix R is the workhorse: entry (i, j) multiplies
the left-side and right-side inner products of dyad i from one
decomposition with dyad j from another. The Frobenius cosine of two task
vectors factors exactly through R and the two spectra, and the
spectrum-free directional similarity is R's uniform-weight aggregate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .linalg import as_matrix
from .task_vector import KnowledgeDecomposition, decompose, TaskVector

__all__ = [
    "RMatrix",
    "TaskAccuracy",
    "AccuracyReport",
    "cos_sim",
    "r_matrix",
    "dir_sim",
    "projected_dir_sim",
    "alignment_score",
    "accuracy_report",
]


@dataclass(frozen=True)
class RMatrix:
    """Pairwise directional-overlap matrix between two decompositions.

    values[i, j] = (u_s^i . u_t^j) * (v_t^j . v_s^i); every entry is a
    product of inner products of unit vectors and so lies in [-1, 1].
    """

    values: np.ndarray

    def __post_init__(self):
        values = as_matrix(self.values, "R values").copy()
        if np.abs(values).max(initial=0.0) > 1.0 + 1e-9:
            raise ValidationError("R entries must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def cos_sim(A, B) -> float:
    """Frobenius cosine between two equal-shaped matrices."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape != B.shape:
        raise ValidationError(f"shape mismatch: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A)
    nb = np.linalg.norm(B)
    if na == 0.0 or nb == 0.0:
        raise NumericalError("cosine undefined for a zero matrix")
    return float(np.sum(A * B) / (na * nb))


def _check_same_ambient(kdS: KnowledgeDecomposition, kdT: KnowledgeDecomposition):
    if kdS.source_shape != kdT.source_shape:
        raise ValidationError(
            f"ambient shapes differ: {kdS.source_shape} vs {kdT.source_shape}"
        )


def r_matrix(kdS: KnowledgeDecomposition, kdT: KnowledgeDecomposition) -> RMatrix:
    """Directional overlap between all dyad pairs of two decompositions."""
    _check_same_ambient(kdS, kdT)
    return RMatrix((kdS.U.T @ kdT.U) * (kdS.V.T @ kdT.V))


def dir_sim(
    kdS: KnowledgeDecomposition,
    kdT: KnowledgeDecomposition,
    sign_robust: bool = False,
) -> float:
    """Spectrum-free directional similarity: sum(R) / sqrt(r_s * r_t).

    ``sign_robust`` maximizes over joint sign flips of the second
    decomposition's (u_j, v_j) column pairs, chosen greedily to make the R
    diagonal positive. A joint flip negates both factors of every affected
    R entry, so the maximized value provably coincides with the default;
    the flag exists so both reporting modes are explicit.
    """
    R = r_matrix(kdS, kdT).values
    if sign_robust:
        d = min(R.shape)
        flips = np.ones(kdT.rank)
        flips[:d] = np.where(np.diag(R)[:d] < 0, -1.0, 1.0)
        # each flip multiplies a column of U_t^T-overlaps and V_t^T-overlaps
        # alike, squaring away: R is invariant, kept explicit for clarity
        R = R * (flips * flips)
    return float(R.sum() / np.sqrt(kdS.rank * kdT.rank))


def projected_dir_sim(
    kdTask: KnowledgeDecomposition,
    merged,
    r: int | None = None,
    sign_robust: bool = False,
) -> float:
    """Directional similarity after restricting ``merged`` to the task's subspace.

    Projects the merged delta onto the column space of the task's left
    singular vectors, re-decomposes the projection at rank ``r`` (the
    task's own rank by default), and measures dir_sim against the task.

    Raises
    ------
    NumericalError
        If the projection is numerically zero; the task's directions are
        then absent from the merge, which is different from directions
        that cancel to similarity zero.
    """
    merged = as_matrix(merged, "merged")
    if merged.shape != kdTask.source_shape:
        raise ValidationError(
            f"merged shape {merged.shape} does not match task shape "
            f"{kdTask.source_shape}"
        )
    if r is None:
        r = kdTask.rank
    P = kdTask.U @ (kdTask.U.T @ merged)
    if np.linalg.norm(P) <= 1e-12 * max(1.0, np.linalg.norm(merged)):
        raise NumericalError(
            "merged vector has no component in the task's singular subspace"
        )
    kdP = decompose(TaskVector("projection", P), r)
    return dir_sim(kdTask, kdP, sign_robust=sign_robust)


def alignment_score(U_tilde, V_tilde, decomps) -> float:
    """How much of every task's dyad structure a basis pair captures.

    Computes ``norm((U~^T [U_1..U_T]) * (V~^T [V_1..V_T]), 'fro')**2``,
    the closed form of the sum over tasks and dyads of the squared
    diagonal coefficient vectors of each projected dyad.
    """
    U_tilde = as_matrix(U_tilde, "U_tilde")
    V_tilde = as_matrix(V_tilde, "V_tilde")
    if not decomps:
        raise ValidationError("at least one decomposition required")
    for mat, label in ((U_tilde, "U_tilde"), (V_tilde, "V_tilde")):
        gram = mat.T @ mat
        if np.abs(gram - np.eye(mat.shape[1])).max() > 1e-6:
            raise ValidationError(f"{label} columns are not orthonormal")
    m, n = decomps[0].source_shape
    for kd in decomps:
        if kd.source_shape != (m, n):
            raise ValidationError("decompositions have mixed ambient shapes")
    if U_tilde.shape[0] != m or V_tilde.shape[0] != n:
        raise ValidationError("basis ambient dimensions do not match tasks")
    Ucat = np.hstack([kd.U for kd in decomps])
    Vcat = np.hstack([kd.V for kd in decomps])
    G = U_tilde.T @ Ucat
    H = V_tilde.T @ Vcat
    return float(np.sum((G * H) ** 2))


@dataclass(frozen=True)
class TaskAccuracy:
    """One row of an externally measured accuracy table, fractions in [0, 1]."""

    task: str
    merged: float
    finetuned: float
    zeroshot: float

    def __post_init__(self):
        for field in ("merged", "finetuned", "zeroshot"):
            v = getattr(self, field)
            if not (isinstance(v, (int, float)) and 0.0 <= v <= 1.0):
                raise ValidationError(
                    f"{field} accuracy for task {self.task!r} must be in [0, 1]"
                )


@dataclass(frozen=True)
class AccuracyReport:
    avg_normalized: float
    per_task_nai: tuple


def accuracy_report(table) -> AccuracyReport:
    """Average normalized accuracy and per-task normalized adaptation index.

    Normalized accuracy of a task is merged / finetuned; the adaptation
    index is (merged - zeroshot) / (finetuned - zeroshot), which is 1 when
    the merge fully recovers the fine-tuned gain and 0 when it does no
    better than the base model.
    """
    rows = list(table)
    if not rows:
        raise ValidationError("accuracy table is empty")
    nai = []
    normed = []
    for row in rows:
        if row.finetuned == 0.0:
            raise ValidationError(
                f"task {row.task!r}: fine-tuned accuracy is zero, "
                "normalized accuracy undefined"
            )
        gain = row.finetuned - row.zeroshot
        if gain <= 0.0:
            raise ValidationError(
                f"task {row.task!r}: fine-tuned accuracy must exceed zero-shot"
            )
        normed.append(row.merged / row.finetuned)
        nai.append((row.task, (row.merged - row.zeroshot) / gain))
    return AccuracyReport(float(np.mean(normed)), tuple(nai))
