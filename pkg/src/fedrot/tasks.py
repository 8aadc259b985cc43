"""Desk-scale training objectives with analytic gradients.

Three task families: the scalar toy problem, low-rank matrix regression,
and Dirichlet-partitioned logistic classification.  Every task exposes
per-client loss and gradients in the LoRA factor parameterization, and a
global loss (mean over clients) for trajectory records.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import PartitionError, UsageError

__all__ = [
    "TaskKind",
    "DirichletPartition",
    "ScalarToyTask",
    "LowRankRegressionTask",
    "LogisticTask",
    "scalar_toy_task",
    "lowrank_regression_task",
    "logistic_task",
    "dirichlet_partition",
    "save_dataset_csv",
    "load_dataset_csv",
]

DEFAULT_SCALAR_TARGETS = (0.5, 1.0, 1.5)


class TaskKind(enum.Enum):
    SCALAR_TOY = "scalar_toy"
    LOWRANK_REGRESSION = "lowrank_regression"
    LOGISTIC = "logistic"


@dataclass(eq=False)
class ScalarToyTask:
    """Client i minimizes ``(B A - target_i)^2`` with scalar factors."""

    targets: tuple[float, ...]
    kind: TaskKind = TaskKind.SCALAR_TOY

    @property
    def n_clients(self) -> int:
        return len(self.targets)

    @property
    def dims(self) -> tuple[int, int]:
        return (1, 1)

    def client_loss(self, i: int, b: np.ndarray, a: np.ndarray) -> float:
        p = float(b[0, 0] * a[0, 0])
        return (p - self.targets[i]) ** 2

    def client_grads(self, i, b, a, sample_idx=None):
        p = float(b[0, 0] * a[0, 0])
        resid = 2.0 * (p - self.targets[i])
        return resid * a.T.copy(), resid * b.T.copy()

    def global_loss(self, b, a) -> float:
        return float(np.mean([self.client_loss(i, b, a) for i in range(self.n_clients)]))

    def sample_count(self, i: int) -> int:
        return 1


def scalar_toy_task(targets=DEFAULT_SCALAR_TARGETS) -> ScalarToyTask:
    targets = tuple(float(t) for t in targets)
    if not targets:
        raise UsageError("scalar toy task requires at least one target")
    return ScalarToyTask(targets)


@dataclass(eq=False)
class LowRankRegressionTask:
    """Client i minimizes ``|b a - W_i|_F^2`` for low-rank targets W_i.

    The targets share a common component of the requested rank; each
    client adds a low-rank perturbation of Frobenius norm
    ``heterogeneity``.
    """

    client_targets: list[np.ndarray]
    probes: np.ndarray = field(default=None)  # n_samples x d_in measurement vectors
    kind: TaskKind = TaskKind.LOWRANK_REGRESSION

    @property
    def n_clients(self) -> int:
        return len(self.client_targets)

    @property
    def dims(self) -> tuple[int, int]:
        return self.client_targets[0].shape

    def client_loss(self, i, b, a) -> float:
        resid = b @ a - self.client_targets[i]
        return float(np.sum(resid * resid))

    def client_grads(self, i, b, a, sample_idx=None):
        resid = b @ a - self.client_targets[i]
        if sample_idx is None:
            return 2.0 * resid @ a.T, 2.0 * b.T @ resid
        # Mini-batch gradient through a probe subset: the per-sample loss is
        # |(b a - W_i) x|^2, whose mean over isotropic probes is unbiased
        # for the full Frobenius objective.
        x = self.probes[sample_idx]
        grad_w = 2.0 * resid @ (x.T @ x) / len(x)
        return grad_w @ a.T, b.T @ grad_w

    def global_loss(self, b, a) -> float:
        return float(np.mean([self.client_loss(i, b, a) for i in range(self.n_clients)]))

    def sample_count(self, i: int) -> int:
        return 1 if self.probes is None else len(self.probes)


def _random_lowrank(rng, d_out, d_in, rank) -> np.ndarray:
    u = rng.standard_normal((d_out, rank))
    v = rng.standard_normal((rank, d_in))
    return u @ v


def lowrank_regression_task(
    d_out: int,
    d_in: int,
    true_rank: int,
    n_clients: int,
    heterogeneity: float,
    seed,
    n_probes: int = 200,
) -> LowRankRegressionTask:
    if not 1 <= true_rank <= min(d_out, d_in):
        raise UsageError(f"true_rank {true_rank} out of range for ({d_out}, {d_in})")
    if n_clients < 1:
        raise UsageError("need at least one client")
    if heterogeneity < 0:
        raise UsageError("heterogeneity must be nonnegative")
    rng = np.random.default_rng(seed)
    shared = _random_lowrank(rng, d_out, d_in, true_rank)
    shared /= np.linalg.norm(shared)
    targets = []
    for _ in range(n_clients):
        if heterogeneity == 0.0:
            targets.append(shared.copy())
            continue
        pert = _random_lowrank(rng, d_out, d_in, true_rank)
        pert *= heterogeneity / np.linalg.norm(pert)
        targets.append(shared + pert)
    probes = rng.standard_normal((n_probes, d_in)) if n_probes > 0 else None
    return LowRankRegressionTask(targets, probes=probes)


@dataclass(eq=False)
class LogisticTask:
    """Cross-entropy classification with logits ``(w0 + b a) x``.

    ``features`` is n x d_in, labels in ``0..n_classes-1``.  ``shards``
    holds per-client sample index arrays; until partitioned, every client
    sees the full dataset split round-robin.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    shards: list[np.ndarray]
    w0: np.ndarray = field(default=None)
    kind: TaskKind = TaskKind.LOGISTIC

    def __post_init__(self):
        if self.w0 is None:
            self.w0 = np.zeros((self.n_classes, self.features.shape[1]))

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def dims(self) -> tuple[int, int]:
        return (self.n_classes, self.features.shape[1])

    def set_shards(self, shards: list[np.ndarray]) -> None:
        if any(len(s) == 0 for s in shards):
            raise UsageError("every shard must be non-empty")
        self.shards = [np.asarray(s, dtype=np.int64) for s in shards]

    def _loss_grad(self, idx, b, a, want_grad):
        x = self.features[idx]
        y = self.labels[idx]
        w = self.w0 + b @ a
        z = x @ w.T
        z -= z.max(axis=1, keepdims=True)
        expz = np.exp(z)
        denom = expz.sum(axis=1)
        logp = z - np.log(denom)[:, None]
        loss = float(-logp[np.arange(len(y)), y].mean())
        if not want_grad:
            return loss, None, None
        p = expz / denom[:, None]
        p[np.arange(len(y)), y] -= 1.0
        gw = p.T @ x / len(y)
        return loss, gw @ a.T, b.T @ gw

    def client_loss(self, i, b, a) -> float:
        return self._loss_grad(self.shards[i], b, a, want_grad=False)[0]

    def client_grads(self, i, b, a, sample_idx=None):
        idx = self.shards[i] if sample_idx is None else self.shards[i][sample_idx]
        _, gb, ga = self._loss_grad(idx, b, a, want_grad=True)
        return gb, ga

    def global_loss(self, b, a) -> float:
        return float(np.mean([self.client_loss(i, b, a) for i in range(self.n_clients)]))

    def sample_count(self, i: int) -> int:
        return len(self.shards[i])

    def accuracy(self, b, a) -> float:
        w = self.w0 + b @ a
        pred = (self.features @ w.T).argmax(axis=1)
        return float((pred == self.labels).mean())


def logistic_task(n_features: int, n_classes: int, n_samples: int, seed) -> LogisticTask:
    """Synthetic Gaussian class clusters with unit within-class covariance.

    Class means are drawn on a sphere of radius 5, far enough apart that
    a centralized linear model reaches high accuracy.
    """
    if n_classes < 2:
        raise UsageError(f"need at least 2 classes, got {n_classes}")
    if n_samples < n_classes:
        raise UsageError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, n_features))
    means *= 5.0 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.concatenate(
        [np.arange(n_classes, dtype=np.int64)] * (n_samples // n_classes)
        + [np.arange(n_samples % n_classes, dtype=np.int64)]
    )
    labels = labels[rng.permutation(n_samples)]
    features = means[labels] + rng.standard_normal((n_samples, n_features))
    shards = [np.arange(n_samples, dtype=np.int64)]
    return LogisticTask(features, labels, n_classes, shards)


@dataclass
class DirichletPartition:
    """Per-class Dirichlet client proportions and the resulting assignment."""

    alpha: float
    proportions: np.ndarray  # n_classes x n_clients, rows sum to 1
    assignment: list[np.ndarray]  # per-client sample indices


def dirichlet_partition(labels, n_clients: int, alpha: float, seed) -> DirichletPartition:
    """Assign labeled samples to clients with Dirichlet(alpha) class skew.

    Deterministic under ``seed``.  Resamples up to 100 times to give every
    client at least one sample; as a last resort moves single samples from
    the largest shard.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise UsageError(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise UsageError(f"n_clients must be >= 1, got {n_clients}")
    if len(labels) < n_clients:
        raise PartitionError(
            f"cannot give {n_clients} clients non-empty shards from "
            f"{len(labels)} samples"
        )
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        proportions = rng.dirichlet(np.full(n_clients, alpha), size=len(classes))
        shards = [[] for _ in range(n_clients)]
        for row, cls in enumerate(classes):
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(len(idx))]
            cuts = (np.cumsum(proportions[row])[:-1] * len(idx)).astype(np.int64)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].append(part)
        assignment = [np.sort(np.concatenate(s)) for s in shards]
        if all(len(s) > 0 for s in assignment):
            return DirichletPartition(alpha, proportions, assignment)
    # Could not avoid empty shards by resampling: move one sample per empty
    # client out of the currently largest shard.
    for client in range(n_clients):
        if len(assignment[client]) == 0:
            donor = int(np.argmax([len(s) for s in assignment]))
            if len(assignment[donor]) <= 1:
                raise PartitionError("no admissible non-empty assignment exists")
            assignment[client] = assignment[donor][-1:]
            assignment[donor] = assignment[donor][:-1]
    return DirichletPartition(alpha, proportions, assignment)


def save_dataset_csv(path, features, labels, assignment) -> None:
    """Dump a sample-based dataset: one row per sample, ``features...,
    label, client_id``."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    client_of = np.full(len(labels), -1, dtype=np.int64)
    for client, idx in enumerate(assignment):
        client_of[idx] = client
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [f"f{j}" for j in range(features.shape[1])] + ["label", "client_id"]
        )
        for row, label, client in zip(features, labels, client_of):
            writer.writerow([f"{x:.17g}" for x in row] + [int(label), int(client)])


def load_dataset_csv(path):
    """Inverse of :func:`save_dataset_csv`; returns (features, labels,
    assignment)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_feat = len(header) - 2
        feats, labels, clients = [], [], []
        for row in reader:
            feats.append([float(x) for x in row[:n_feat]])
            labels.append(int(row[n_feat]))
            clients.append(int(row[n_feat + 1]))
    features = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    clients = np.asarray(clients, dtype=np.int64)
    assignment = [
        np.flatnonzero(clients == c) for c in range(int(clients.max()) + 1)
    ]
    return features, labels, assignment
