"""Federated-averaging simulation over graph-classification clients.

Training protocol:

1. Stratified train/test split of the graph dataset.
2. The training indices are sorted by label, cut into contiguous partitions,
   and the shuffled partitions are dealt to clients.
3. Every round, each client copies the global weights, trains on its next
   ``local_batches_per_round`` mini-batches with its own Adam state, and
   uploads. The server averages the uploads (unweighted, ascending client
   order) and evaluates the new global model on the test split.

The centralized baseline reuses the same loop with a single client whose
data is a random sample of the pooled training set, one client's share in
size.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .gnn import Metrics, ModelConfig, ModelWeights, evaluate, init_weights, train_batch
from .graphs import GraphSample
from .numerics import AdamState, RngStream
from .signal_ingest import LabelSet, split_train_test

# Stream ids for non-client randomness; clients use their own index.
SPLIT_STREAM = 1 << 40
PARTITION_STREAM = (1 << 40) + 1
INIT_STREAM = (1 << 40) + 2
CENTRAL_SAMPLE_STREAM = (1 << 40) + 3


@dataclass
class FederationConfig:
    n_clients: int = 5
    n_partitions: int = 15
    partitions_per_client: int = 3
    epochs: int = 5
    local_batches_per_round: int = 1
    lr: float = 0.015
    batch_size: int = 8
    test_ratio: float = 0.25

    def __post_init__(self):
        if self.n_clients < 1 or self.n_partitions < 1 or self.partitions_per_client < 1:
            raise ConfigError("client and partition counts must be positive")
        if self.n_clients * self.partitions_per_client != self.n_partitions:
            raise ConfigError(
                f"n_clients * partitions_per_client = {self.n_clients * self.partitions_per_client} "
                f"must equal n_partitions = {self.n_partitions}"
            )
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.local_batches_per_round < 1:
            raise ConfigError("local_batches_per_round must be at least 1 for a training run")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0.0 < self.test_ratio < 1.0:
            raise ConfigError("test_ratio must be in (0, 1)")


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    n_clients: int
    n_partitions: int
    partitions_per_client: int
    partitions: list[np.ndarray]  # partition id -> positions into the label vector
    assignment: list[list[int]]  # client -> partition ids

    def client_indices(self, client: int) -> np.ndarray:
        parts = [self.partitions[p] for p in self.assignment[client]]
        return np.concatenate(parts) if parts else np.array([], dtype=np.int64)


def partition_noniid(
    labels,
    n_clients: int = 5,
    n_partitions: int = 15,
    partitions_per_client: int = 3,
    rng: RngStream | None = None,
) -> PartitionPlan:
    """Label-sorted contiguous partitions dealt to clients.

    ``labels`` are the labels of the training samples; returned indices are
    positions into that vector. Indices are sorted by label (stable), cut into
    ``n_partitions`` chunks of ``S // n_partitions`` with the remainder spread
    one each over the leading chunks, the chunk ids are shuffled with ``rng``
    and dealt ``partitions_per_client`` at a time in client order.
    """
    y = np.asarray(labels, dtype=np.int64)
    if n_clients * partitions_per_client != n_partitions:
        raise ConfigError("n_clients * partitions_per_client must equal n_partitions")
    s = y.size
    if s < n_partitions:
        raise DataError(f"{s} samples cannot fill {n_partitions} partitions")
    order = np.argsort(y, kind="stable")
    base, extra = divmod(s, n_partitions)
    sizes = [base + (1 if i < extra else 0) for i in range(n_partitions)]
    bounds = np.cumsum([0] + sizes)
    partitions = [order[bounds[i] : bounds[i + 1]] for i in range(n_partitions)]
    ids = np.arange(n_partitions) if rng is None else rng.permutation(n_partitions)
    assignment = [
        [int(p) for p in ids[c * partitions_per_client : (c + 1) * partitions_per_client]]
        for c in range(n_clients)
    ]
    return PartitionPlan(n_clients, n_partitions, partitions_per_client, partitions, assignment)


# --------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------

def fedavg(weights: list[ModelWeights]) -> ModelWeights:
    """Unweighted element-wise mean, accumulated in ascending client order.

    A running mean ``m += (w_i - m) / i`` is used, so averaging identical
    models returns them bit for bit and a single model is returned unchanged.
    """
    if not weights:
        raise ConfigError("fedavg needs at least one model")
    shapes = weights[0].shapes
    for w in weights[1:]:
        if w.shapes != shapes:
            raise ShapeError(f"model shapes differ: {w.shapes} vs {shapes}")
    mean = [t.copy() for t in weights[0].tensors()]
    for i, w in enumerate(weights[1:], start=2):
        for m, t in zip(mean, w.tensors()):
            m += (t - m) / i
    return ModelWeights(mean[:-1], mean[-1])


# --------------------------------------------------------------------------
# Clients and rounds
# --------------------------------------------------------------------------

@dataclass
class ClientState:
    client_id: int
    samples: list[GraphSample]
    weights: ModelWeights
    opt: AdamState
    rng: RngStream
    batch_size: int = 8
    cursor: int = 0
    steps: int = 0
    _order: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.samples:
            raise ConfigError(f"client {self.client_id} holds no samples")

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self.samples) / self.batch_size)

    def next_batch(self) -> list[GraphSample]:
        """Next mini-batch; the local data is reshuffled at every pass start."""
        if self.cursor == 0:
            self._order = self.rng.permutation(len(self.samples))
        idx = self._order[self.cursor * self.batch_size : (self.cursor + 1) * self.batch_size]
        self.cursor = (self.cursor + 1) % self.n_batches
        return [self.samples[i] for i in idx]

    def local_step(self, model_cfg: ModelConfig) -> float:
        batch = self.next_batch()
        self.weights, self.opt, loss = train_batch(self.weights, batch, self.opt, self.rng, model_cfg)
        self.steps += 1
        return loss


@dataclass
class RoundReport:
    round: int
    client_losses: list[list[float]]  # per client, one loss per local batch
    client_steps: list[list[int]]
    test_loss: float | None
    metrics: Metrics | None
    wall_clock: float

    @property
    def client_mean_loss(self) -> list[float | None]:
        return [float(np.mean(l)) if l else None for l in self.client_losses]

    def to_dict(self) -> dict:
        out = {"round": self.round, "train_loss": self.client_mean_loss, "test_loss": self.test_loss}
        if self.metrics is not None:
            out["accuracy"] = self.metrics.accuracy
            out["macro_f1"] = self.metrics.macro_f1
        return out


def _client_update(client: ClientState, global_ws: ModelWeights, n_batches: int, model_cfg: ModelConfig):
    client.weights = global_ws.copy()
    losses, steps = [], []
    for _ in range(n_batches):
        losses.append(client.local_step(model_cfg))
        steps.append(client.steps - 1)
    return client.weights, losses, steps


def run_round(
    global_ws: ModelWeights,
    clients: list[ClientState],
    model_cfg: ModelConfig,
    local_batches_per_round: int = 1,
    test_data: list[GraphSample] | None = None,
    round_index: int = 0,
    workers: int = 1,
) -> tuple[ModelWeights, RoundReport]:
    """One communication round: local training, upload, FedAvg, evaluation."""
    if not clients:
        raise ConfigError("a round needs at least one client")
    if local_batches_per_round < 0:
        raise ConfigError("local_batches_per_round must be non-negative")
    start = time.perf_counter()
    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda c: _client_update(c, global_ws, local_batches_per_round, model_cfg), clients)
            )
    else:
        results = [_client_update(c, global_ws, local_batches_per_round, model_cfg) for c in clients]
    new_global = fedavg([r[0] for r in results])
    metrics = evaluate(new_global, test_data, model_cfg) if test_data else None
    report = RoundReport(
        round=round_index,
        client_losses=[r[1] for r in results],
        client_steps=[r[2] for r in results],
        test_loss=metrics.loss if metrics else None,
        metrics=metrics,
        wall_clock=time.perf_counter() - start,
    )
    return new_global, report


# --------------------------------------------------------------------------
# Full runs
# --------------------------------------------------------------------------

@dataclass
class TrainingResult:
    mode: str
    weights: ModelWeights
    model_cfg: ModelConfig
    reports: list[RoundReport]
    final: Metrics
    split_train: np.ndarray
    split_test: np.ndarray
    client_indices: list[np.ndarray]  # dataset indices held by each trainer
    corr_kind: str = ""

    @property
    def rounds(self) -> int:
        return len(self.reports)

    def metrics_json(self) -> str:
        # Wall-clock is deliberately left out so reruns are byte-identical.
        doc = {
            "mode": self.mode,
            "corr_kind": self.corr_kind,
            "rounds": self.rounds,
            "final": {
                "accuracy": self.final.accuracy,
                "macro_f1": self.final.macro_f1,
                "per_class_f1": list(self.final.per_class_f1),
                "absent_classes": list(self.final.absent_classes),
                "test_loss": self.final.loss,
            },
            "n_train_samples": [int(len(ix)) for ix in self.client_indices],
            "n_test_samples": int(len(self.split_test)),
            "per_round": [r.to_dict() for r in self.reports],
        }
        return json.dumps(doc, indent=2) + "\n"

    def losses_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "client", "batch", "split", "loss"])
        for rep in self.reports:
            for cid, (losses, steps) in enumerate(zip(rep.client_losses, rep.client_steps)):
                for loss, step in zip(losses, steps):
                    writer.writerow([rep.round, cid, step, "train", repr(loss)])
            if rep.test_loss is not None:
                writer.writerow([rep.round, -1, -1, "test", repr(rep.test_loss)])
        return buf.getvalue()


def n_rounds(batch_counts: list[int], epochs: int, local_batches_per_round: int) -> int:
    return math.ceil(max(batch_counts) / local_batches_per_round) * epochs


def run_training(
    dataset: list[GraphSample],
    mode: str,
    fed_cfg: FederationConfig,
    model_cfg: ModelConfig,
    seed: int,
    workers: int = 1,
    corr_kind: str = "",
    progress=None,
) -> TrainingResult:
    """Federated or centralized training on a graph dataset.

    ``progress`` is an optional callable receiving each :class:`RoundReport`.
    """
    if mode not in ("federated", "centralized"):
        raise ConfigError(f"unknown mode {mode!r}")
    if not dataset:
        raise DataError("empty dataset")
    labels = LabelSet(np.array([g.y for g in dataset]), model_cfg.n_classes)
    split = split_train_test(labels, fed_cfg.test_ratio, RngStream(seed, SPLIT_STREAM))
    train_labels = labels.labels[split.train]
    plan = partition_noniid(
        train_labels,
        fed_cfg.n_clients,
        fed_cfg.n_partitions,
        fed_cfg.partitions_per_client,
        RngStream(seed, PARTITION_STREAM),
    )
    if mode == "federated":
        holdings = [np.sort(split.train[plan.client_indices(c)]) for c in range(fed_cfg.n_clients)]
    else:
        share = len(split.train) // fed_cfg.n_clients
        chosen = RngStream(seed, CENTRAL_SAMPLE_STREAM).choice(split.train, size=share, replace=False)
        holdings = [np.sort(chosen)]

    global_ws = init_weights(model_cfg, RngStream(seed, INIT_STREAM))
    clients = [
        ClientState(
            client_id=c,
            samples=[dataset[i] for i in idx],
            weights=global_ws.copy(),
            opt=AdamState.zeros(global_ws.n_params, lr=fed_cfg.lr),
            rng=RngStream(seed, c),
            batch_size=fed_cfg.batch_size,
        )
        for c, idx in enumerate(holdings)
    ]
    test_data = [dataset[i] for i in split.test]
    total_rounds = n_rounds([c.n_batches for c in clients], fed_cfg.epochs, fed_cfg.local_batches_per_round)

    reports = []
    for r in range(total_rounds):
        global_ws, rep = run_round(
            global_ws, clients, model_cfg, fed_cfg.local_batches_per_round, test_data, r, workers
        )
        reports.append(rep)
        if progress is not None:
            progress(rep)
    return TrainingResult(
        mode=mode,
        weights=global_ws,
        model_cfg=model_cfg,
        reports=reports,
        final=reports[-1].metrics,
        split_train=split.train,
        split_test=split.test,
        client_indices=holdings,
        corr_kind=corr_kind,
    )
