"""Local client training, FedAvg aggregation and the synchronous round loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import WindowedDataset, partition
from ..metrics import MetricsReport, compute_metrics, confusion_matrix
from ..model import ModelConfig, init_params, loss_and_grads, predict
from ..numerics import AdamHyper, AdamState, ParamTree, adam_step, check_congruent, make_rng, mix_seed

log = logging.getLogger(__name__)

METRICS_HEADER = ["round", "accuracy", "precision", "recall", "f1", "train_loss", "seconds"]


@dataclass
class FedConfig:
    clients: int = 3
    local_epochs: int = 1
    rounds: int = 10
    batch_size: int = 32
    hyper: AdamHyper = field(default_factory=AdamHyper)
    partition: str = "iid"
    seed: int = 0
    eval_every: int = 1
    persist_optimizer: bool = False
    weighting: str = "samples"
    record_time: bool = False

    def __post_init__(self):
        for name in ("clients", "local_epochs", "rounds", "batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"fed.{name} must be >= 1")
        if self.weighting not in ("samples", "uniform"):
            raise ValueError("fed.weighting must be 'samples' or 'uniform'")


@dataclass
class ClientUpdate:
    round_id: int
    client_id: int
    n_k: int
    params: ParamTree
    train_loss: float = float("nan")
    steps: int = 0


@dataclass
class RoundRecord:
    round_id: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    train_loss: float
    seconds: float | None = None

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))
        return [str(self.round_id), fmt(self.accuracy), fmt(self.precision), fmt(self.recall),
                fmt(self.f1), fmt(self.train_loss), fmt(self.seconds)]


class AggregationError(ValueError):
    pass


def client_seed(seed: int, client_id: int, round_id: int) -> int:
    return mix_seed(seed, "client", client_id, round_id)


# -----------------------------------------------------------------------------
# Aggregation
# -----------------------------------------------------------------------------


def fedavg_aggregate(updates: list[ClientUpdate], weighting: str = "samples") -> ParamTree:
    """``sum_k (n_k / n) * theta_k``, accumulated in ascending client-id order."""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    rounds = {u.round_id for u in ordered}
    if len(rounds) != 1:
        raise AggregationError(f"updates from mixed rounds {sorted(rounds)}")
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError("duplicate client ids in one round")
    for u in ordered[1:]:
        check_congruent(ordered[0].params, u.params)
    if weighting == "samples":
        if any(u.n_k < 1 for u in ordered):
            raise AggregationError("every client needs n_k >= 1")
        total = float(sum(u.n_k for u in ordered))
        weights = [u.n_k / total for u in ordered]
    else:
        weights = [1.0 / len(ordered)] * len(ordered)
    out = ordered[0].params.zeros_like()
    for weight, u in zip(weights, ordered):
        for name in out:
            out[name] += weight * u.params[name]
    return out


# -----------------------------------------------------------------------------
# Local training
# -----------------------------------------------------------------------------


def train_epoch(params: ParamTree, state: AdamState, shard: WindowedDataset,
                model_config: ModelConfig, hyper: AdamHyper, batch_size: int,
                rng: np.random.Generator):
    """One shuffled pass; returns ``(params, state, mean loss, steps)``."""
    order = rng.permutation(len(shard))
    losses = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        loss, grads = loss_and_grads(
            params, model_config, shard.windows[idx], shard.labels[idx], rng=rng, training=True
        )
        params, state = adam_step(params, grads, state, hyper)
        losses.append(loss)
    return params, state, float(np.mean(losses)), len(losses)


def local_train(global_params: ParamTree, shard: WindowedDataset, epochs: int,
                hyper: AdamHyper, seed: int, model_config: ModelConfig,
                batch_size: int = 32, round_id: int = 0, client_id: int = 0,
                opt_state: AdamState | None = None, return_state: bool = False):
    """Run ``epochs`` epochs of Adam from ``global_params`` on one client's shard.

    Adam starts from zero moments unless ``opt_state`` is given. Epoch ``e``
    draws its shuffle and dropout masks from ``make_rng(seed, "epoch", e)``.
    """
    if len(shard) == 0:
        raise ValueError("empty client shard")
    if epochs < 1:
        raise ValueError("need at least one local epoch")
    params = global_params.copy()
    state = opt_state if opt_state is not None else AdamState.zeros(params)
    steps, epoch_loss = 0, float("nan")
    for epoch in range(epochs):
        rng = make_rng(seed, "epoch", epoch)
        params, state, epoch_loss, n_steps = train_epoch(
            params, state, shard, model_config, hyper, batch_size, rng
        )
        steps += n_steps
    update = ClientUpdate(round_id, client_id, len(shard), params, epoch_loss, steps)
    if return_state:
        return update, state
    return update


def train_centralized(dataset: WindowedDataset, model_config: ModelConfig, epochs: int,
                      hyper: AdamHyper, seed: int, batch_size: int = 32,
                      params: ParamTree | None = None) -> tuple[ParamTree, list[float]]:
    """Single-node training with one continuous Adam state.

    Epoch ``r`` uses the same random stream client 0 would use in round ``r``,
    so this matches a one-client federation that keeps its optimizer state.
    """
    params = init_params(model_config, seed) if params is None else params.copy()
    state = AdamState.zeros(params)
    losses = []
    for epoch in range(epochs):
        upd, state = local_train(params, dataset, 1, hyper, client_seed(seed, 0, epoch),
                                 model_config, batch_size, opt_state=state, return_state=True)
        params = upd.params
        losses.append(upd.train_loss)
    return params, losses


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


def evaluate(params: ParamTree, model_config: ModelConfig, dataset: WindowedDataset) -> MetricsReport:
    pred = predict(params, model_config, dataset.windows)
    return compute_metrics(confusion_matrix(dataset.labels, pred, model_config.num_classes))


# -----------------------------------------------------------------------------
# Round loop
# -----------------------------------------------------------------------------


class InProcessClients:
    """All clients live in this process and train one after another."""

    def __init__(self, shards: list[WindowedDataset], fed: FedConfig, model_config: ModelConfig):
        self.shards = shards
        self.fed = fed
        self.model_config = model_config
        self.states: dict[int, AdamState] = {}

    @property
    def sample_counts(self) -> list[int]:
        return [len(s) for s in self.shards]

    def train_round(self, round_id: int, global_params: ParamTree) -> list[ClientUpdate]:
        updates = []
        for cid, shard in enumerate(self.shards):
            upd, state = local_train(
                global_params, shard, self.fed.local_epochs, self.fed.hyper,
                client_seed(self.fed.seed, cid, round_id), self.model_config,
                self.fed.batch_size, round_id, cid,
                opt_state=self.states.get(cid) if self.fed.persist_optimizer else None,
                return_state=True,
            )
            if self.fed.persist_optimizer:
                self.states[cid] = state
            updates.append(upd)
        return updates

    def finish(self) -> None:
        pass


def client_shards(train: WindowedDataset, fed: FedConfig) -> list[WindowedDataset]:
    plan = partition(train, fed.clients, fed.partition, fed.seed)
    return [train.subset(idx) for idx in plan.shards]


def run_federated(fed: FedConfig, model_config: ModelConfig, train: WindowedDataset,
                  test: WindowedDataset, clients=None, params: ParamTree | None = None,
                  metrics_path=None) -> tuple[list[RoundRecord], ParamTree]:
    """Synchronous FedAvg: broadcast, local training, aggregate, evaluate; ``rounds`` times.

    ``clients`` is any object with ``train_round(round_id, params)``; the
    default trains every shard in this process.
    """
    if clients is None:
        clients = InProcessClients(client_shards(train, fed), fed, model_config)
    global_params = init_params(model_config, fed.seed) if params is None else params.copy()
    records: list[RoundRecord] = []
    writer = _MetricsWriter(metrics_path) if metrics_path is not None else None
    try:
        for round_id in range(fed.rounds):
            started = time.perf_counter()
            updates = clients.train_round(round_id, global_params)
            if len(updates) != fed.clients:
                raise AggregationError(
                    f"round {round_id}: expected {fed.clients} updates, got {len(updates)}"
                )
            global_params = fedavg_aggregate(updates, fed.weighting)
            train_loss = float(np.mean([u.train_loss for u in sorted(updates, key=lambda u: u.client_id)]))
            if (round_id + 1) % fed.eval_every == 0 or round_id == fed.rounds - 1:
                report = evaluate(global_params, model_config, test)
                metrics = (report.accuracy, report.precision, report.recall, report.f1)
            else:
                metrics = (None, None, None, None)
            seconds = time.perf_counter() - started if fed.record_time else None
            record = RoundRecord(round_id, *metrics, train_loss, seconds)
            records.append(record)
            log.info("round %d: f1=%s loss=%.4f", round_id, record.f1, train_loss)
            if writer is not None:
                writer.write(record)
    finally:
        if writer is not None:
            writer.close()
        clients.finish()
    return records, global_params


class _MetricsWriter:
    def __init__(self, path):
        self.fh = open(Path(path), "w", newline="")
        self.csv = csv.writer(self.fh, lineterminator="\n")
        self.csv.writerow(METRICS_HEADER)

    def write(self, record: RoundRecord) -> None:
        self.csv.writerow(record.csv_row())
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def write_metrics_csv(records: list[RoundRecord], path) -> None:
    writer = _MetricsWriter(path)
    try:
        for r in records:
            writer.write(r)
    finally:
        writer.close()


def expected_steps(n_k: int, batch_size: int, epochs: int) -> int:
    return epochs * math.ceil(n_k / batch_size)
