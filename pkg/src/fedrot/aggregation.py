"""Server-side aggregation strategies and the aggregation-error metric."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, UsageError
from .lora import GlobalModel, LoraAdapter, semantic_update
from .numerics import frobenius_norm

__all__ = [
    "Strategy",
    "AggregationError",
    "aggregate_ideal",
    "aggregate_factorwise",
    "aggregation_error",
    "lagrange_error_oracle",
    "server_step",
]


class Strategy(enum.Enum):
    IDEAL = "ideal"  # diagnostics only, never broadcast
    FEDIT = "fedit"
    FFA_LORA = "ffa_lora"
    ROLORA = "rolora"
    FEDROT = "fedrot"
    SCALAR_RESCALE = "scalar_rescale"
    RANDOM_ROTATION = "random_rotation"


ROTATIONAL_STRATEGIES = frozenset(
    {Strategy.FEDROT, Strategy.SCALAR_RESCALE, Strategy.RANDOM_ROTATION}
)


@dataclass
class AggregationError:
    """Frobenius norm of the factor-wise-minus-ideal discrepancy.

    ``per_layer`` carries one entry per LoRA layer; ``frobenius`` is their
    sum (errors are summed, not averaged, across layers).
    """

    frobenius: float
    per_layer: list[float] = field(default_factory=list)

    @classmethod
    def combine(cls, errors: list["AggregationError"]) -> "AggregationError":
        per_layer = [x for e in errors for x in e.per_layer]
        return cls(frobenius=float(sum(per_layer)), per_layer=per_layer)


def _check_adapters(adapters: list[LoraAdapter]) -> None:
    if not adapters:
        raise UsageError("aggregation requires at least one adapter")
    dims = adapters[0].dims
    rank = adapters[0].rank
    for ad in adapters[1:]:
        if ad.dims != dims or ad.rank != rank:
            raise UsageError(
                f"inconsistent adapter shapes: {ad.dims} rank {ad.rank} "
                f"vs {dims} rank {rank}"
            )


def aggregate_ideal(adapters: list[LoraAdapter]) -> np.ndarray:
    """Exact mean of client updates ``(1/N) sum b_i a_i``; rank may exceed r."""
    _check_adapters(adapters)
    total = np.zeros(adapters[0].dims)
    for ad in adapters:
        total += semantic_update(ad)
    return total / len(adapters)


def aggregate_factorwise(adapters: list[LoraAdapter]) -> LoraAdapter:
    """Naive factor-wise mean ``(mean b_i, mean a_i)``; rank stays r."""
    _check_adapters(adapters)
    n = len(adapters)
    b = sum(ad.b for ad in adapters) / n
    a = sum(ad.a for ad in adapters) / n
    return LoraAdapter(b, a, adapters[0].rank)


def aggregation_error(adapters: list[LoraAdapter]) -> AggregationError:
    """``|factorwise product - ideal mean|_F`` for one LoRA layer."""
    _check_adapters(adapters)
    diff = semantic_update(aggregate_factorwise(adapters)) - aggregate_ideal(adapters)
    err = frobenius_norm(diff)
    return AggregationError(frobenius=err, per_layer=[err])


def lagrange_error_oracle(adapters: list[LoraAdapter]) -> np.ndarray:
    """Pairwise double-sum form of the aggregation-error matrix.

    ``-(1/(2 N^2)) sum_i sum_j (b_i - b_j)(a_i - a_j)``; test oracle for
    :func:`aggregation_error`, kept independent of it.
    """
    _check_adapters(adapters)
    n = len(adapters)
    total = np.zeros(adapters[0].dims)
    for i in range(n):
        for j in range(n):
            total += (adapters[i].b - adapters[j].b) @ (adapters[i].a - adapters[j].a)
    return -total / (2.0 * n * n)


def server_step(
    strategy: Strategy,
    reports,
    round_index: int,
    config,
    history: list[GlobalModel],
) -> tuple[GlobalModel, AggregationError]:
    """Aggregate one round of client reports into the next global model.

    The incoming adapters are already transformed client-side, so all
    rotational strategies reduce to factor-wise averaging here.  FFA-LoRA
    keeps the frozen A of the previous global bit-for-bit; RoLoRA keeps
    whichever factor was frozen this round.  Returns the new model along
    with the aggregation error of the incoming adapters.
    """
    if strategy is Strategy.IDEAL:
        raise UsageError(
            "the ideal strategy is diagnostics-only; its full-rank output "
            "cannot be re-broadcast as a rank-r adapter"
        )
    if len(reports) != config.n_clients:
        raise ProtocolError(
            f"expected {config.n_clients} client reports, got {len(reports)}"
        )
    adapters = [r.adapter for r in reports]
    _check_adapters(adapters)
    err = aggregation_error(adapters)
    prev = history[-1]
    averaged = aggregate_factorwise(adapters)
    if strategy is Strategy.FFA_LORA:
        new_adapter = LoraAdapter(averaged.b, prev.adapter.a, averaged.rank)
    elif strategy is Strategy.ROLORA:
        if round_index % 2 == 1:  # B trained this round, A frozen
            new_adapter = LoraAdapter(averaged.b, prev.adapter.a, averaged.rank)
        else:
            new_adapter = LoraAdapter(prev.adapter.b, averaged.a, averaged.rank)
    else:
        new_adapter = averaged
    return GlobalModel(prev.w0, new_adapter), err
