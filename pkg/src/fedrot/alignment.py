"""Client-side factor transformations.

Covers the optimal orthogonal (Procrustes) alignment, its softened
interpolation, scalar rescaling, Haar-random rotations, the alignment
schedule, and reference selection.  All transformations preserve the
semantic update ``b @ a`` up to floating-point rounding.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, UsageError
from .lora import GlobalModel, LoraAdapter
from .numerics import as_matrix, determinant, frobenius_norm, qr_orthonormal, svd

__all__ = [
    "Rotation",
    "AlignmentTarget",
    "ScheduleAblation",
    "ReferenceKind",
    "ReferenceMode",
    "procrustes_rotation",
    "soft_rotation",
    "apply_alignment",
    "scalar_rescale_align",
    "haar_random_rotation",
    "select_reference",
    "alignment_schedule",
]

log = logging.getLogger(__name__)

_ORTHO_TOL = 1e-10


class AlignmentTarget(enum.Enum):
    FACTOR_A = "factor_a"
    FACTOR_B = "factor_b"


class ScheduleAblation(enum.Enum):
    ALTERNATE = "alternate"
    A_ONLY = "a_only"
    B_ONLY = "b_only"


@dataclass(eq=False)
class Rotation:
    """Special-orthogonal rank x rank matrix with verified invariants."""

    r: np.ndarray

    def __post_init__(self):
        self.r = as_matrix(self.r)
        n = self.r.shape[0]
        if self.r.shape[1] != n:
            raise UsageError(f"rotation must be square, got {self.r.shape}")
        dev = frobenius_norm(self.r.T @ self.r - np.eye(n))
        if dev > _ORTHO_TOL:
            raise UsageError(f"matrix is not orthogonal (|R^T R - I| = {dev:.3e})")
        det = determinant(self.r)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise UsageError(f"rotation must have det +1, got {det!r}")

    @property
    def rank(self) -> int:
        return self.r.shape[0]

    @classmethod
    def identity(cls, rank: int) -> "Rotation":
        return cls(np.eye(rank))

    def is_identity(self) -> bool:
        return bool((self.r == np.eye(self.rank)).all())


def _project_so(u: np.ndarray, vt: np.ndarray) -> np.ndarray:
    """``u @ diag(1, ..., 1, det(u vt)) @ vt`` -- nearest special-orthogonal
    matrix given the SVD factors of the input."""
    s = determinant(u @ vt)
    sign = 1.0 if s > 0 else -1.0
    u = u.copy()
    u[:, -1] *= sign
    return u @ vt


def procrustes_rotation(local, reference, target: AlignmentTarget) -> Rotation:
    """Optimal rotation aligning a local factor with the reference factor.

    For ``FACTOR_A`` (both r x d) the returned ``R`` minimizes
    ``|R^T local - reference|_F`` via the correlation matrix
    ``M = reference @ local^T``.  For ``FACTOR_B`` (both d x r) it
    minimizes ``|local R - reference|_F`` via ``M = reference^T @ local``.
    The minimization runs over special-orthogonal matrices only; when the
    correlation matrix wants a reflection the smallest singular direction
    is sign-corrected.

    A degenerate (zero) correlation matrix yields the identity rotation
    with a logged warning; this is the round-one situation where the
    broadcast factors are still ill-conditioned.
    """
    local = as_matrix(local)
    reference = as_matrix(reference)
    if local.shape != reference.shape:
        raise UsageError(
            f"local/reference shape mismatch: {local.shape} vs {reference.shape}"
        )
    if target is AlignmentTarget.FACTOR_A:
        rank = local.shape[0]
        if local.shape[1] < rank:
            raise UsageError(
                f"factor A must be rank x d with rank <= d, got {local.shape}"
            )
        m = reference @ local.T
    else:
        rank = local.shape[1]
        if local.shape[0] < rank:
            raise UsageError(
                f"factor B must be d x rank with rank <= d, got {local.shape}"
            )
        m = reference.T @ local
    if frobenius_norm(m) == 0.0:
        log.warning(
            "degenerate correlation matrix in Procrustes alignment; using identity"
        )
        return Rotation.identity(rank)
    res = svd(m)
    # R = V diag(1, ..., det(U V^T)) U^T, the closed-form SO(r) maximizer
    # of tr(R M).
    return Rotation(_project_so(res.vt.T, res.u.T))


def soft_rotation(hard: Rotation, lam: float) -> Rotation:
    """Interpolate between identity and ``hard``, then reproject to SO(r).

    ``lam = 0`` returns the identity exactly; ``lam = 1`` returns the hard
    rotation.  Intermediate values form ``(1 - lam) I + lam hard`` and
    take its nearest special-orthogonal matrix.
    """
    if not 0.0 <= lam <= 1.0:
        raise UsageError(f"soft rotation strength must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return Rotation.identity(hard.rank)
    if lam == 1.0:
        return Rotation(hard.r.copy())
    blended = (1.0 - lam) * np.eye(hard.rank) + lam * hard.r
    res = svd(blended)
    if res.sigma[-1] <= 1e-12 * max(res.sigma[0], 1.0):
        # Singular blend (measure-zero eigenvalue cancellation): nudge the
        # interpolation point and retry once.
        lam_adj = lam + 1e-9 if lam + 1e-9 <= 1.0 else lam - 1e-9
        blended = (1.0 - lam_adj) * np.eye(hard.rank) + lam_adj * hard.r
        res = svd(blended)
    return Rotation(_project_so(res.u, res.vt))


def apply_alignment(ad: LoraAdapter, rot: Rotation) -> LoraAdapter:
    """Gauge transformation ``(b R, R^T a)``; the product ``b a`` is unchanged."""
    if rot.rank != ad.rank:
        raise UsageError(
            f"rotation rank {rot.rank} does not match adapter rank {ad.rank}"
        )
    if rot.is_identity():
        return ad.copy()
    return LoraAdapter(ad.b @ rot.r, rot.r.T @ ad.a, ad.rank)


def scalar_rescale_align(local, reference) -> float:
    """Closed-form scalar minimizing ``|c local - reference|_F``.

    ``c = <local, reference> / |local|_F^2``.  The caller applies ``c`` to
    the aligned factor and ``1/c`` to the complementary one.  A near-zero
    ``c`` would explode the complementary factor, so it is reported as a
    degenerate alignment and the caller falls back to ``c = 1``.
    """
    local = as_matrix(local)
    reference = as_matrix(reference)
    if local.shape != reference.shape:
        raise UsageError(
            f"local/reference shape mismatch: {local.shape} vs {reference.shape}"
        )
    denom = float(np.sum(local * local))
    if denom == 0.0:
        raise UsageError("scalar rescaling undefined for a zero local factor")
    c = float(np.sum(local * reference)) / denom
    if abs(c) <= 1e-12:
        raise DegenerateInputError(
            f"scalar rescaling produced a degenerate coefficient c={c!r}"
        )
    return c


def haar_random_rotation(rank: int, seed) -> Rotation:
    """Haar-uniform sample from SO(rank).

    Gaussian matrix -> sign-canonical QR -> flip one column if the
    determinant is negative.  Rank-deficient draws (measure zero) are
    resampled, at most 5 times.
    """
    if rank < 1:
        raise UsageError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    for _ in range(5):
        z = rng.standard_normal((rank, rank))
        try:
            q = qr_orthonormal(z)
        except Exception:
            continue
        if determinant(q) < 0.0:
            q = q.copy()
            q[:, -1] *= -1.0
        return Rotation(q)
    raise UsageError("failed to sample a full-rank Gaussian matrix in 5 attempts")


class ReferenceKind(enum.Enum):
    PREV_GLOBAL = "prev_global"
    OLDER_GLOBAL = "older_global"
    RANDOM_CLIENT = "random_client"


@dataclass(frozen=True)
class ReferenceMode:
    kind: ReferenceKind = ReferenceKind.PREV_GLOBAL
    lag: int = 0

    def __post_init__(self):
        if self.kind is ReferenceKind.OLDER_GLOBAL and self.lag < 2:
            raise UsageError(f"older-global reference requires lag >= 2, got {self.lag}")


def select_reference(
    history: list[GlobalModel],
    mode: ReferenceMode,
    round_index: int,
    client_snapshots: list[LoraAdapter],
    seed,
) -> LoraAdapter:
    """Pick the adapter clients align against this round.

    ``history`` holds global models up to and including the broadcast for
    this round; ``client_snapshots`` holds the previous round's client
    reports (may be empty in round one, in which case the random-client
    mode falls back to the previous global model).
    """
    if not history:
        raise UsageError("reference selection requires a non-empty history")
    if mode.kind is ReferenceKind.PREV_GLOBAL:
        return history[-1].adapter
    if mode.kind is ReferenceKind.OLDER_GLOBAL:
        if round_index <= mode.lag:
            raise UsageError(
                f"older-global reference with lag {mode.lag} needs round > lag, "
                f"got round {round_index}"
            )
        # history[-1] is the previous round's model (lag 1); clamp to the
        # earliest recorded model.
        idx = max(len(history) - mode.lag, 0)
        return history[idx].adapter
    if not client_snapshots:
        return history[-1].adapter
    rng = np.random.default_rng(seed)
    return client_snapshots[int(rng.integers(len(client_snapshots)))]


def alignment_schedule(round_index: int, ablation: ScheduleAblation) -> AlignmentTarget:
    """Factor to align this round: A on odd rounds, B on even rounds, unless
    a single-factor ablation pins the target."""
    if round_index < 1:
        raise UsageError(f"rounds are 1-based, got {round_index}")
    if ablation is ScheduleAblation.A_ONLY:
        return AlignmentTarget.FACTOR_A
    if ablation is ScheduleAblation.B_ONLY:
        return AlignmentTarget.FACTOR_B
    return AlignmentTarget.FACTOR_A if round_index % 2 == 1 else AlignmentTarget.FACTOR_B
