"""Low-rank adapter values and their basic transformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, UsageError
from .numerics import as_matrix, frobenius_norm, matmul

__all__ = [
    "LoraAdapter",
    "GlobalModel",
    "semantic_update",
    "gauge_rescale",
    "init_adapter",
]


@dataclass(eq=False)
class LoraAdapter:
    """Low-rank update ``delta_w = b @ a`` with ``b`` d_out x r, ``a`` r x d_in."""

    b: np.ndarray
    a: np.ndarray
    rank: int

    def __post_init__(self):
        self.b = as_matrix(self.b)
        self.a = as_matrix(self.a)
        if self.b.shape[1] != self.rank or self.a.shape[0] != self.rank:
            raise UsageError(
                f"factor shapes {self.b.shape}, {self.a.shape} do not match rank {self.rank}"
            )
        if not 1 <= self.rank <= min(self.b.shape[0], self.a.shape[1]):
            raise UsageError(
                f"rank {self.rank} out of range for dims "
                f"({self.b.shape[0]}, {self.a.shape[1]})"
            )

    @property
    def dims(self) -> tuple[int, int]:
        return self.b.shape[0], self.a.shape[1]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.b.copy(), self.a.copy(), self.rank)


@dataclass(eq=False)
class GlobalModel:
    """Frozen base weights plus the current global adapter."""

    w0: np.ndarray
    adapter: LoraAdapter

    def __post_init__(self):
        self.w0 = as_matrix(self.w0)
        if self.w0.shape != self.adapter.dims:
            raise UsageError(
                f"base shape {self.w0.shape} inconsistent with adapter dims {self.adapter.dims}"
            )

    def effective_weights(self) -> np.ndarray:
        return self.w0 + semantic_update(self.adapter)


def semantic_update(ad: LoraAdapter) -> np.ndarray:
    """The update the adapter represents: ``b @ a``."""
    return matmul(ad.b, ad.a)


def gauge_rescale(ad: LoraAdapter) -> LoraAdapter:
    """Rebalance factor norms without changing the semantic update.

    Returns ``(b / c, c * a)`` with ``c = sqrt(|b| / |a|)`` so that the
    two factors end up with equal Frobenius norm.  Diagnostics-only; the
    training loop never applies this.
    """
    norm_a = frobenius_norm(ad.a)
    norm_b = frobenius_norm(ad.b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateInputError(
            f"gauge_rescale undefined for zero-norm factor (|a|={norm_a}, |b|={norm_b})"
        )
    c = np.sqrt(norm_b / norm_a)
    return LoraAdapter(ad.b / c, ad.a * c, ad.rank)


def init_adapter(d_out: int, d_in: int, rank: int, seed) -> LoraAdapter:
    """Server-side init: ``b = 0`` and Gaussian ``a`` with std 1/sqrt(d_in).

    The initial semantic update is therefore exactly zero.
    """
    if not 1 <= rank <= min(d_out, d_in):
        raise UsageError(f"rank {rank} out of range for dims ({d_out}, {d_in})")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(rank, d_in))
    b = np.zeros((d_out, rank))
    return LoraAdapter(b, a, rank)
