"""End-to-end federated training loop.

Each round: broadcast the global adapter, run deterministic local
gradient descent on every client, apply the strategy's client-side factor
transformation, aggregate at the server, and record diagnostics.  A run
is a pure function of its config: identical config and seed give
bit-identical trajectories (wall-clock fields excepted).
"""

from __future__ import annotations

import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregation import ROTATIONAL_STRATEGIES, Strategy, server_step
from .alignment import (
    AlignmentTarget,
    ReferenceKind,
    ReferenceMode,
    Rotation,
    ScheduleAblation,
    alignment_schedule,
    apply_alignment,
    haar_random_rotation,
    procrustes_rotation,
    scalar_rescale_align,
    select_reference,
    soft_rotation,
)
from .errors import DegenerateInputError, DivergenceError, UsageError
from .lora import GlobalModel, LoraAdapter, init_adapter, semantic_update
from .numerics import frobenius_norm
from .tasks import (
    DEFAULT_SCALAR_TARGETS,
    TaskKind,
    dirichlet_partition,
    logistic_task,
    lowrank_regression_task,
    scalar_toy_task,
)

__all__ = [
    "TaskSpec",
    "FederationConfig",
    "ClientReport",
    "RoundRecord",
    "RunResult",
    "SweepCell",
    "build_task",
    "local_train",
    "client_round",
    "run_federation",
    "run_sweep",
]

log = logging.getLogger(__name__)

LOSS_DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    targets: tuple[float, ...] = DEFAULT_SCALAR_TARGETS  # scalar toy
    true_rank: int = 1  # low-rank regression
    heterogeneity: float = 0.0
    n_features: int = 8  # logistic classification
    n_classes: int = 4
    n_samples: int = 200


@dataclass(frozen=True)
class FederationConfig:
    strategy: Strategy
    n_clients: int
    rank: int
    dims: tuple[int, int]
    rounds: int
    local_steps: int
    learning_rate: float
    lam: float = 0.0
    reference_mode: ReferenceMode = ReferenceMode()
    schedule: ScheduleAblation = ScheduleAblation.ALTERNATE
    task: TaskSpec = TaskSpec(kind=TaskKind.LOWRANK_REGRESSION)
    dirichlet_alpha: float = 0.5
    seed: int = 0
    align_from_round: int = 2
    batch_size: int | None = None
    init_a_value: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 1 <= self.rank <= min(self.dims):
            raise UsageError(f"rank {self.rank} out of range for dims {self.dims}")
        if self.align_from_round < 1:
            raise UsageError("align_from_round must be >= 1")
        if self.rounds < 1 or self.local_steps < 1:
            raise UsageError("rounds and local_steps must be >= 1")
        if self.n_clients < 1:
            raise UsageError("n_clients must be >= 1")
        if self.learning_rate < 0:
            raise UsageError("learning_rate must be nonnegative")
        if self.dirichlet_alpha <= 0:
            raise UsageError("dirichlet_alpha must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise UsageError("batch_size must be >= 1 when set")


@dataclass(eq=False)
class ClientReport:
    client_id: int
    adapter: LoraAdapter  # post-alignment factors
    local_loss_final: float
    rotation_deviation: float  # |R_soft - I|_F, 0 for non-rotational strategies
    # Diagnostics beyond the wire payload:
    raw_adapter: LoraAdapter = None
    procrustes_deviation: float = float("nan")  # |R* - I|_F
    dist_a_raw: float = float("nan")  # |A_i - A_ref|_F before alignment
    dist_b_raw: float = float("nan")
    tau: float = 0.0  # |B|_F * |A|_F of the reported factors
    grad_norm_max: float = 0.0
    semantic_drift: float = 0.0  # |b~a~ - ba|_F / max(1, |ba|_F)


@dataclass
class RoundRecord:
    round: int
    loss: float
    agg_error: float
    dispersion: float  # phi(lambda): aligned factors vs reference
    dispersion_unaligned: float  # phi(0): raw factors vs reference
    alignment_gain: float  # 1 - phi(lambda)/phi(0), nan when undefined
    rotation_deviation: float  # mean |R_soft - I|_F over clients
    tau_diag: float  # max over clients of |B|_F |A|_F
    global_norm_product: float  # |B_bar|_F * |A_bar|_F
    grad_norm_max: float
    dist_a_min: float
    dist_b_min: float
    kappa_max: float  # max |R*-I| / aligned-factor drift
    semantic_drift_max: float
    aligned: bool
    upload_scalars: int  # per client, this round
    download_scalars: int
    wall_ms: float


@dataclass(eq=False)
class RunResult:
    rounds: list[RoundRecord]
    final_model: GlobalModel
    config: FederationConfig
    wall_time: float
    history: list[GlobalModel] = field(default_factory=list)


def build_task(config: FederationConfig):
    """Instantiate the task a config describes, including data partitioning."""
    spec = config.task
    if spec.kind is TaskKind.SCALAR_TOY:
        if config.dims != (1, 1):
            raise UsageError("scalar toy task requires dims (1, 1)")
        if config.n_clients != len(spec.targets):
            raise UsageError(
                f"scalar toy task has {len(spec.targets)} targets but config "
                f"declares {config.n_clients} clients"
            )
        return scalar_toy_task(spec.targets)
    if spec.kind is TaskKind.LOWRANK_REGRESSION:
        return lowrank_regression_task(
            config.dims[0],
            config.dims[1],
            spec.true_rank,
            config.n_clients,
            spec.heterogeneity,
            seed=[config.seed, 101],
            n_probes=spec.n_samples,
        )
    if spec.kind is TaskKind.LOGISTIC:
        if config.dims != (spec.n_classes, spec.n_features):
            raise UsageError(
                "logistic task requires dims (n_classes, n_features) = "
                f"({spec.n_classes}, {spec.n_features}), got {config.dims}"
            )
        task = logistic_task(
            spec.n_features, spec.n_classes, spec.n_samples, seed=[config.seed, 102]
        )
        part = dirichlet_partition(
            task.labels, config.n_clients, config.dirichlet_alpha, seed=[config.seed, 103]
        )
        task.set_shards(part.assignment)
        return task
    raise UsageError(f"unknown task kind {spec.kind}")


def _frozen_factors(strategy: Strategy, round_index: int) -> tuple[bool, bool]:
    """(freeze_b, freeze_a) for the local update rule."""
    if strategy is Strategy.FFA_LORA:
        return False, True
    if strategy is Strategy.ROLORA:
        # Odd rounds train B (A frozen), even rounds train A (B frozen).
        if round_index % 2 == 1:
            return False, True
        return True, False
    return False, False


def local_train(
    client: int,
    start: LoraAdapter,
    task,
    steps: int,
    eta: float,
    strategy: Strategy,
    round_index: int,
    seed,
    batch_size: int | None = None,
):
    """Deterministic (full-batch) gradient descent on the client's shard.

    Returns the trained adapter and the largest gradient norm observed.
    Mini-batching, when enabled, draws seeded batches from
    ``(seed, client, round)`` so results never depend on scheduling.
    """
    if steps < 1:
        raise UsageError("steps must be >= 1")
    b = start.b.copy()
    a = start.a.copy()
    freeze_b, freeze_a = _frozen_factors(strategy, round_index)
    n_samples = task.sample_count(client)
    rng = None
    if batch_size is not None and batch_size < n_samples:
        rng = np.random.default_rng([seed, client, round_index])
    grad_norm_max = 0.0
    for step in range(steps):
        idx = None
        if rng is not None:
            idx = rng.choice(n_samples, size=batch_size, replace=False)
        gb, ga = task.client_grads(client, b, a, sample_idx=idx)
        if not (np.isfinite(gb).all() and np.isfinite(ga).all()):
            raise DivergenceError(
                f"non-finite gradient on client {client}",
                round_index=round_index,
                step_index=step,
            )
        grad_norm_max = max(
            grad_norm_max, float(np.linalg.norm(gb)), float(np.linalg.norm(ga))
        )
        if not freeze_b:
            b -= eta * gb
        if not freeze_a:
            a -= eta * ga
        if not (np.isfinite(b).all() and np.isfinite(a).all()):
            raise DivergenceError(
                f"non-finite parameters on client {client}",
                round_index=round_index,
                step_index=step,
            )
    return LoraAdapter(b, a, start.rank), grad_norm_max


def client_round(
    client: int,
    broadcast: LoraAdapter,
    task,
    config: FederationConfig,
    round_index: int,
    reference: LoraAdapter,
) -> ClientReport:
    """One client's round: local training followed by the strategy's
    client-side transformation."""
    if round_index < 1:
        raise UsageError("rounds are 1-based")
    trained, grad_norm_max = local_train(
        client,
        broadcast,
        task,
        config.local_steps,
        config.learning_rate,
        config.strategy,
        round_index,
        config.seed,
        batch_size=config.batch_size,
    )
    target = alignment_schedule(round_index, config.schedule)
    reported = trained
    rotation_deviation = 0.0
    procrustes_deviation = float("nan")
    strategy = config.strategy
    if strategy is Strategy.FEDROT and round_index >= config.align_from_round:
        if target is AlignmentTarget.FACTOR_A:
            hard = procrustes_rotation(trained.a, reference.a, target)
        else:
            hard = procrustes_rotation(trained.b, reference.b, target)
        soft = soft_rotation(hard, config.lam)
        reported = apply_alignment(trained, soft)
        eye = np.eye(config.rank)
        rotation_deviation = frobenius_norm(soft.r - eye)
        procrustes_deviation = frobenius_norm(hard.r - eye)
    elif strategy is Strategy.SCALAR_RESCALE:
        try:
            if target is AlignmentTarget.FACTOR_A:
                c = scalar_rescale_align(trained.a, reference.a)
                reported = LoraAdapter(trained.b / c, trained.a * c, trained.rank)
            else:
                c = scalar_rescale_align(trained.b, reference.b)
                reported = LoraAdapter(trained.b * c, trained.a / c, trained.rank)
        except DegenerateInputError:
            log.warning(
                "degenerate scalar rescaling on client %d round %d; skipping",
                client,
                round_index,
            )
            reported = trained
    elif strategy is Strategy.RANDOM_ROTATION:
        rot = haar_random_rotation(
            config.rank, seed=[config.seed, 7901, round_index, client]
        )
        reported = apply_alignment(trained, rot)
        rotation_deviation = frobenius_norm(rot.r - np.eye(config.rank))

    raw_update = semantic_update(trained)
    drift = frobenius_norm(semantic_update(reported) - raw_update)
    drift /= max(1.0, frobenius_norm(raw_update))
    return ClientReport(
        client_id=client,
        adapter=reported,
        local_loss_final=task.client_loss(client, trained.b, trained.a),
        rotation_deviation=rotation_deviation,
        raw_adapter=trained,
        procrustes_deviation=procrustes_deviation,
        dist_a_raw=frobenius_norm(trained.a - reference.a),
        dist_b_raw=frobenius_norm(trained.b - reference.b),
        tau=frobenius_norm(reported.b) * frobenius_norm(reported.a),
        grad_norm_max=grad_norm_max,
        semantic_drift=drift,
    )


def _payload_scalars(config: FederationConfig) -> int:
    d_out, d_in = config.dims
    return d_out * config.rank + config.rank * d_in


def run_federation(config: FederationConfig) -> RunResult:
    """Run the full protocol for ``config.rounds`` rounds.

    Deterministic for a fixed config; raises :class:`DivergenceError`
    (carrying the partial trajectory) if any loss or parameter blows up.
    """
    t_start = time.perf_counter()
    task = build_task(config)
    if task.n_clients != config.n_clients:
        raise UsageError(
            f"task provides {task.n_clients} clients, config wants {config.n_clients}"
        )
    d_out, d_in = config.dims
    adapter0 = init_adapter(d_out, d_in, config.rank, seed=[config.seed, 100])
    if config.init_a_value is not None:
        adapter0 = LoraAdapter(
            adapter0.b, np.full((config.rank, d_in), config.init_a_value), config.rank
        )
    history = [GlobalModel(np.zeros((d_out, d_in)), adapter0)]
    records: list[RoundRecord] = []
    prev_snapshots: list[LoraAdapter] = []
    payload = _payload_scalars(config)

    for t in range(1, config.rounds + 1):
        t_round = time.perf_counter()
        reference = select_reference(
            history, config.reference_mode, t, prev_snapshots, seed=[config.seed, 211, t]
        )
        download = payload
        if (
            config.reference_mode.kind is ReferenceKind.RANDOM_CLIENT
            and prev_snapshots
        ):
            download += payload
            log.debug("round %d: charging one extra adapter download for the "
                      "random-client reference", t)
        broadcast = history[-1].adapter
        reports = [
            client_round(i, broadcast, task, config, t, reference)
            for i in range(config.n_clients)
        ]
        model, err = server_step(config.strategy, reports, t, config, history)
        loss = task.global_loss(model.adapter.b, model.adapter.a)
        target = alignment_schedule(t, config.schedule)
        phi_raw = _dispersion_of(
            [r.raw_adapter for r in reports], reference, target
        )
        phi_aligned = _dispersion_of([r.adapter for r in reports], reference, target)
        gain = 1.0 - phi_aligned / phi_raw if phi_raw > 0 else float("nan")
        aligned = (
            config.strategy in ROTATIONAL_STRATEGIES
            and (config.strategy is not Strategy.FEDROT or t >= config.align_from_round)
        )
        kappa_vals = []
        for r in reports:
            dist = r.dist_a_raw if target is AlignmentTarget.FACTOR_A else r.dist_b_raw
            if np.isfinite(r.procrustes_deviation) and dist > 0:
                kappa_vals.append(r.procrustes_deviation / dist)
        record = RoundRecord(
            round=t,
            loss=loss,
            agg_error=err.frobenius,
            dispersion=phi_aligned,
            dispersion_unaligned=phi_raw,
            alignment_gain=gain,
            rotation_deviation=float(np.mean([r.rotation_deviation for r in reports])),
            tau_diag=max(r.tau for r in reports),
            global_norm_product=frobenius_norm(model.adapter.b)
            * frobenius_norm(model.adapter.a),
            grad_norm_max=max(r.grad_norm_max for r in reports),
            dist_a_min=min(r.dist_a_raw for r in reports),
            dist_b_min=min(r.dist_b_raw for r in reports),
            kappa_max=max(kappa_vals) if kappa_vals else float("nan"),
            semantic_drift_max=max(r.semantic_drift for r in reports),
            aligned=aligned,
            upload_scalars=payload,
            download_scalars=download,
            wall_ms=(time.perf_counter() - t_round) * 1e3,
        )
        records.append(record)
        history.append(model)
        prev_snapshots = [r.adapter for r in reports]
        if not np.isfinite(loss) or loss > LOSS_DIVERGENCE_LIMIT:
            partial = RunResult(
                rounds=records,
                final_model=model,
                config=config,
                wall_time=time.perf_counter() - t_start,
                history=history,
            )
            raise DivergenceError(
                f"global loss diverged at round {t} (loss={loss!r})",
                round_index=t,
                partial=partial,
            )
    return RunResult(
        rounds=records,
        final_model=history[-1],
        config=config,
        wall_time=time.perf_counter() - t_start,
        history=history,
    )


def _dispersion_of(adapters, reference, target):
    if target is AlignmentTarget.FACTOR_A:
        dists = [frobenius_norm(ad.a - reference.a) ** 2 for ad in adapters]
    else:
        dists = [frobenius_norm(ad.b - reference.b) ** 2 for ad in adapters]
    return float(np.mean(dists))


_TASK_OVERRIDES = {"heterogeneity", "true_rank", "targets"}


def apply_overrides(config: FederationConfig, params: dict) -> FederationConfig:
    """Produce a config with sweep-cell parameter overrides applied."""
    plain = {}
    task_spec = config.task
    for name, value in params.items():
        if name == "lambda":
            plain["lam"] = float(value)
        elif name == "strategy":
            plain["strategy"] = value if isinstance(value, Strategy) else Strategy(value)
        elif name == "schedule":
            plain["schedule"] = (
                value if isinstance(value, ScheduleAblation) else ScheduleAblation(value)
            )
        elif name in _TASK_OVERRIDES:
            task_spec = replace(task_spec, **{name: value})
        elif name == "seed":
            plain["seed"] = int(value)
        else:
            if not hasattr(config, name):
                raise UsageError(f"unknown sweep parameter {name!r}")
            plain[name] = value
    return replace(config, task=task_spec, **plain)


@dataclass(eq=False)
class SweepCell:
    params: dict
    seed: int
    result: RunResult | None = None
    error: str | None = None


def _run_cell(args) -> SweepCell:
    config, params, seed = args
    cell = SweepCell(params=params, seed=seed)
    try:
        cell.result = run_federation(replace(apply_overrides(config, params), seed=seed))
    except Exception as exc:  # individual failures recorded, sweep continues
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_sweep(
    base: FederationConfig,
    sweep: dict[str, list],
    seeds,
    jobs: int = 1,
) -> list[SweepCell]:
    """Cartesian product of the parameter grid and the seed list.

    Cells are independent; with ``jobs > 1`` they run in a process pool.
    Output order matches the grid order regardless of scheduling.
    """
    if not sweep:
        raise UsageError("sweep grid must be non-empty")
    seeds = list(seeds)
    if not seeds:
        raise UsageError("sweep needs at least one seed")
    names = list(sweep.keys())
    cells = [
        (base, dict(zip(names, values)), int(seed))
        for values in itertools.product(*(sweep[n] for n in names))
        for seed in seeds
    ]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell, cells))
    return [_run_cell(c) for c in cells]
