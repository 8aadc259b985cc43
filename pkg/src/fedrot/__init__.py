"""Deterministic federated LoRA simulator with rotational client alignment."""

__version__ = "0.1.0"

from .aggregation import (
    AggregationError,
    Strategy,
    aggregate_factorwise,
    aggregate_ideal,
    aggregation_error,
)
from .alignment import (
    AlignmentTarget,
    ReferenceKind,
    ReferenceMode,
    Rotation,
    ScheduleAblation,
    apply_alignment,
    haar_random_rotation,
    procrustes_rotation,
    soft_rotation,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    EstimationError,
    FedRotError,
    NumericError,
    PartitionError,
    ProtocolError,
    UsageError,
)
from .federation import (
    FederationConfig,
    RunResult,
    TaskSpec,
    run_federation,
    run_sweep,
)
from .lora import GlobalModel, LoraAdapter, init_adapter, semantic_update
from .metrics import (
    TheoryConstants,
    alignment_gain,
    dispersion,
    estimate_constants,
    feasible_lambda_range,
    gamma,
)
from .tasks import TaskKind, dirichlet_partition

__all__ = [
    "__version__",
    "AggregationError",
    "Strategy",
    "aggregate_factorwise",
    "aggregate_ideal",
    "aggregation_error",
    "AlignmentTarget",
    "ReferenceKind",
    "ReferenceMode",
    "Rotation",
    "ScheduleAblation",
    "apply_alignment",
    "haar_random_rotation",
    "procrustes_rotation",
    "soft_rotation",
    "ConfigError",
    "DegenerateInputError",
    "DivergenceError",
    "EstimationError",
    "FedRotError",
    "NumericError",
    "PartitionError",
    "ProtocolError",
    "UsageError",
    "FederationConfig",
    "RunResult",
    "TaskSpec",
    "run_federation",
    "run_sweep",
    "GlobalModel",
    "LoraAdapter",
    "init_adapter",
    "semantic_update",
    "TheoryConstants",
    "alignment_gain",
    "dispersion",
    "estimate_constants",
    "feasible_lambda_range",
    "gamma",
    "TaskKind",
    "dirichlet_partition",
]
