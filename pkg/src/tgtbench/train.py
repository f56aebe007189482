"""Unsupervised training: maximize the expected weighted sum-rate of TGT powers."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import ops
from .diffcore.optim import AdamWState, adamw_step
from .diffcore.tensor import Tape, Tensor, backward
from .netgen import ChannelBatch, Dataset, group_by_size
from .objective import batch_weighted_sum_rate
from .tgt import TgtConfig, TgtParams, encode_batch, forward_encoded, init_params, predict_batch

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    val_fraction: float = 0.05
    schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; known: {sorted(SCHEDULES)}")

    def to_dict(self) -> dict:
        return asdict(self)


# epoch, total epochs -> lr multiplier
SCHEDULES: dict[str, Callable[[int, int], float]] = {
    "constant": lambda epoch, total: 1.0,
    "cosine": lambda epoch, total: 0.5 * (1.0 + math.cos(math.pi * epoch / total)),
}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, instance_id: int, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, dataset instance {instance_id}")
        self.instance_id = instance_id
        self.epoch = epoch


def wsr_tensor(p: Tensor, batch: ChannelBatch) -> Tensor:
    """Differentiable per-instance weighted sum-rate, shape (B,), on the raw channel."""
    g = batch.H * batch.H
    n = batch.n
    direct = np.diagonal(g, axis1=-2, axis2=-1)
    off = g * (1.0 - np.eye(n))
    B = len(batch)
    interference = ops.reshape(ops.matmul(off, ops.reshape(p, (B, n, 1))), (B, n))
    sinr = ops.div(ops.mul(p, direct), ops.add(interference, batch.sigma2[:, None]))
    rates = ops.mul(ops.log(ops.add(sinr, 1.0)), 1.0 / LN2)
    return ops.sum(ops.mul(rates, batch.weights), axis=-1)


def loss(batch: ChannelBatch, params: TgtParams, training: bool = True, update_stats: bool = True) -> Tensor:
    """Negative mean weighted sum-rate over the batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    p = forward_encoded(encode_batch(batch.H, batch.weights), params, training=training, update_stats=update_stats)
    p = ops.mul(p, (batch.pmax / params.config.pmax)[:, None])
    return ops.neg(ops.mean(wsr_tensor(p, batch)))


@dataclass
class EvalSummary:
    mean: float
    std: float
    per_instance: np.ndarray

    def write_csv(self, path, method: str, ids: Sequence[int] | None = None) -> None:
        ids = range(len(self.per_instance)) if ids is None else ids
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "sum_rate", "method"])
            for i, value in zip(ids, self.per_instance):
                writer.writerow([i, repr(float(value)), method])


Allocator = Callable[[ChannelBatch], np.ndarray]


def evaluate_allocator(allocate: Allocator, dataset: Dataset, batch_size: int = 256, threads: int = 1) -> EvalSummary:
    """Run an allocator over a dataset (grouped by size) and score every instance.

    Chunks are independent, so ``threads > 1`` changes wall time only.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    chunks = [
        idx[start : start + batch_size]
        for _, idx in sorted(group_by_size(dataset.instances).items())
        for start in range(0, len(idx), batch_size)
    ]

    def score(chunk):
        batch = ChannelBatch.stack([dataset.instances[i] for i in chunk])
        return batch_weighted_sum_rate(batch.H, batch.sigma2, batch.weights, allocate(batch))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(score, chunks))
    else:
        scored = [score(chunk) for chunk in chunks]
    values = np.empty(len(dataset))
    for chunk, vals in zip(chunks, scored):
        values[chunk] = vals
    return EvalSummary(float(values.mean()), float(values.std()), values)


def tgt_allocator(params: TgtParams) -> Allocator:
    return lambda batch: predict_batch(batch, params)


def max_power_allocator(batch: ChannelBatch) -> np.ndarray:
    return np.broadcast_to(batch.pmax[:, None], batch.weights.shape).copy()


def evaluate(params: TgtParams, dataset: Dataset, batch_size: int = 256, threads: int = 1) -> EvalSummary:
    return evaluate_allocator(tgt_allocator(params), dataset, batch_size, threads)


@dataclass
class TrainResult:
    params: TgtParams  # best-validation parameters
    final_params: TgtParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    train_ids: list[int] = field(default_factory=list)
    val_ids: list[int] = field(default_factory=list)
    first_batch_loss: float = float("nan")

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "val_sum_rate"])
            for row in self.history:
                writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_sum_rate"])])


def split_by_topology(dataset: Dataset, fraction: float, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Hold out whole topologies; returns (train indices, validation indices)."""
    topo = sorted(set(dataset.topology_ids))
    n_val = int(round(fraction * len(topo)))
    if fraction > 0 and n_val == 0 and len(topo) > 1:
        n_val = 1
    held = set(rng.permutation(topo)[:n_val].tolist()) if n_val else set()
    train = [i for i, t in enumerate(dataset.topology_ids) if t not in held]
    val = [i for i, t in enumerate(dataset.topology_ids) if t in held]
    return train, val


def _batches(indices: list[int], dataset: Dataset, batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    groups = group_by_size([dataset.instances[i] for i in indices])
    batches = []
    for _, local in sorted(groups.items()):
        members = [indices[j] for j in local]
        order = rng.permutation(len(members))
        shuffled = [members[j] for j in order]
        batches.extend(shuffled[s : s + batch_size] for s in range(0, len(shuffled), batch_size))
    return [batches[j] for j in rng.permutation(len(batches))]


def _find_bad_instance(batch_ids: list[int], dataset: Dataset, params: TgtParams) -> int:
    for i in batch_ids:
        single = ChannelBatch.stack([dataset.instances[i]])
        value = loss(single, params, training=False).data
        if not np.all(np.isfinite(value)):
            return i
    return batch_ids[0]


def train(
    train_config: TrainConfig,
    tgt_config: TgtConfig,
    dataset: Dataset,
    params: TgtParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train TGT with AdamW on the negative mean weighted sum-rate.

    Everything random (init, split, shuffles) derives from ``train_config.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    root = np.random.SeedSequence(train_config.seed)
    init_ss, split_ss, shuffle_ss = root.spawn(3)
    if params is None:
        params = init_params(tgt_config, np.random.default_rng(init_ss))
    else:
        params = params.copy()
    train_ids, val_ids = split_by_topology(dataset, train_config.val_fraction, np.random.default_rng(split_ss))
    if not train_ids:
        train_ids, val_ids = val_ids, []
    val_set = dataset.subset(val_ids) if val_ids else dataset.subset(train_ids)
    state = AdamWState(
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    schedule = SCHEDULES[train_config.schedule]
    shuffle_rng = np.random.default_rng(shuffle_ss)

    history: list[dict] = []
    best, best_epoch, best_val = params.copy(), 0, -np.inf
    first_loss = None
    for epoch in range(1, train_config.epochs + 1):
        state.lr = train_config.lr * schedule(epoch - 1, train_config.epochs)
        losses, weights = [], []
        for batch_ids in _batches(train_ids, dataset, train_config.batch_size, shuffle_rng):
            batch = ChannelBatch.stack([dataset.instances[i] for i in batch_ids])
            params.zero_grad()
            with Tape() as tape:
                value = loss(batch, params)
            if not np.isfinite(value.data):
                raise NonFiniteLossError(_find_bad_instance(batch_ids, dataset, params), epoch)
            backward(tape, value)
            adamw_step(params.tensors, {k: t.grad for k, t in params.tensors.items() if t.grad is not None}, state)
            losses.append(float(value.data))
            weights.append(len(batch_ids))
            if first_loss is None:
                first_loss = losses[0]
        epoch_loss = float(np.average(losses, weights=weights))
        val = evaluate(params, val_set).mean
        row = {"epoch": epoch, "loss": epoch_loss, "val_sum_rate": val}
        history.append(row)
        log.info("epoch %d loss %.4f val %.4f", epoch, epoch_loss, val)
        if on_epoch is not None:
            on_epoch(row)
        if val > best_val:
            best, best_epoch, best_val = params.copy(), epoch, val
    if train_config.lr > 0 and history and not history[-1]["loss"] < first_loss:
        warnings.warn(
            f"training loss did not decrease (first batch {first_loss:.4f}, last epoch {history[-1]['loss']:.4f})",
            RuntimeWarning,
            stacklevel=2,
        )
    return TrainResult(best, params, history, best_epoch, train_ids, val_ids, first_loss)
