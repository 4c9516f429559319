"""Training loops for the relation, vanilla and dropout U-Nets.

Recipe: Adam on summed per-head binary cross-entropy, learning rate halved
every ``lr_halving_period`` epochs. Runs are fully determined by the seed.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, DatasetIOError, DivergenceError, UsageError
from .synth import SampleRecord, by_id, sample_pairs
from .tensor import AdamState, adam_step
from .unet import Network, forward_relation, forward_vanilla, parse_key_values

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    initial_lr: float = 1e-4
    lr_halving_period: int = 20
    batch_size: int = 8
    batches_per_epoch: Optional[int] = None
    seed: int = 0
    loss_head_weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be >= 1")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.lr_halving_period < 1:
            raise ConfigError("lr_halving_period must be >= 1")
        if len(self.loss_head_weights) != 4:
            raise ConfigError("loss_head_weights needs four values (s1, s2, rp, rc)")

    def steps_per_epoch(self, train_size: int) -> int:
        if self.batches_per_epoch is not None:
            return self.batches_per_epoch
        return math.ceil(train_size / self.batch_size)

    @classmethod
    def from_mapping(cls, raw: Dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            try:
                if f.name == "initial_lr":
                    kwargs[f.name] = float(value)
                elif f.name == "loss_head_weights":
                    kwargs[f.name] = tuple(float(v) for v in value.split(","))
                elif f.name == "batches_per_epoch" and value.lower() in ("", "auto", "none"):
                    kwargs[f.name] = None
                else:
                    kwargs[f.name] = int(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name}: {value!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        raw = parse_key_values(text)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls.from_mapping(raw)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.initial_lr * 0.5 ** (epoch // config.lr_halving_period)


@dataclass
class TrainLog:
    head_names: Tuple[str, ...]
    rows: List[dict] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        return ["epoch", "lr", "total_loss"] + [f"loss_{h}" for h in self.head_names]

    def total_losses(self) -> List[float]:
        return [r["total_loss"] for r in self.rows]

    def write_csv(self, path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            with open(tmp, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\r\n")
                writer.writerow(self.columns)
                for row in self.rows:
                    writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in self.columns[1:]])
            os.replace(tmp, path)
        except OSError as exc:
            raise DatasetIOError(f"{path}: cannot write train log") from exc


@dataclass
class TrainResult:
    network: Network
    log: TrainLog


def _apply_adam(net: Network, state: AdamState, lr: float) -> AdamState:
    new_params, state = adam_step(net.flat_params(), net.flat_grads(), state, learning_rate=lr)
    net.load_flat(new_params)
    return state


def _check_finite(losses: Dict[str, T.Tensor], epoch: int, step: int) -> None:
    for head, loss in losses.items():
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}, head {head}")


def _run(net: Network, config: TrainConfig, train_size: int,
         step_fn: Callable[[np.random.Generator], Dict[str, T.Tensor]],
         weights: Dict[str, float], on_epoch: Optional[Callable[[dict], None]]) -> TrainLog:
    # overflow shows up as a non-finite loss, which _check_finite reports
    with np.errstate(over="ignore", invalid="ignore"):
        return _epochs(net, config, train_size, step_fn, weights, on_epoch)


def _epochs(net: Network, config: TrainConfig, train_size: int,
            step_fn: Callable[[np.random.Generator], Dict[str, T.Tensor]],
            weights: Dict[str, float], on_epoch: Optional[Callable[[dict], None]]) -> TrainLog:
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(net.parameter_count(), learning_rate=config.initial_lr)
    heads = tuple(weights)
    train_log = TrainLog(heads)
    steps = config.steps_per_epoch(train_size)
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        sums = dict.fromkeys(heads, 0.0)
        total_sum = 0.0
        for step in range(steps):
            losses = step_fn(rng)
            _check_finite(losses, epoch, step)
            total = None
            for h in heads:
                term = weights[h] * losses[h]
                total = term if total is None else total + term
            net.zero_grad()
            T.backward(total)
            state = _apply_adam(net, state, lr)
            total_sum += total.item()
            for h in heads:
                sums[h] += losses[h].item()
        row = {"epoch": epoch + 1, "lr": lr, "total_loss": total_sum / steps}
        row.update({f"loss_{h}": sums[h] / steps for h in heads})
        train_log.rows.append(row)
        log.debug("epoch %d lr %.3g loss %.5f", epoch + 1, lr, row["total_loss"])
        if on_epoch is not None:
            on_epoch(row)
    return train_log


def train_relation(net: Network, train_set: Sequence[SampleRecord], config: TrainConfig,
                   on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train the four heads on independently sampled pairs. Mutates ``net``."""
    if net.config.variant != "relation":
        raise UsageError(f"train_relation needs a relation network, got {net.config.variant}")
    if not train_set:
        raise UsageError("empty training set")
    data = by_id(train_set)
    ids = sorted(data)

    def step(rng):
        batch = sample_pairs(data, ids, config.batch_size, rng)
        out = forward_relation(net, batch.x1, batch.x2, train_mode=True)
        targets = batch.targets()
        return {h: T.bce_with_logits(logit, targets[h]) for h, logit in out.heads().items()}

    weights = dict(zip(("s1", "s2", "rp", "rc"), config.loss_head_weights))
    return TrainResult(net, _run(net, config, len(ids), step, weights, on_epoch))


def _id_stream(ids: Sequence[int], rng: np.random.Generator) -> Iterator[int]:
    while True:
        for j in rng.permutation(len(ids)):
            yield ids[j]


def train_vanilla(net: Network, train_set: Sequence[SampleRecord], config: TrainConfig,
                  on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Single-head training; dropout is active for the dropout variant."""
    if net.config.variant not in ("vanilla", "vanilla_dropout"):
        raise UsageError(f"train_vanilla needs a vanilla network, got {net.config.variant}")
    if not train_set:
        raise UsageError("empty training set")
    data = by_id(train_set)
    ids = sorted(data)
    stream: List[Iterator[int]] = []

    def step(rng):
        if not stream:
            stream.append(_id_stream(ids, rng))
        picked = [next(stream[0]) for _ in range(config.batch_size)]
        x = np.stack([data[i].image for i in picked])[:, None]
        t = np.stack([data[i].mask for i in picked])[:, None].astype(np.float64)
        logits = forward_vanilla(net, x, train_mode=True, rng=rng)
        return {"s": T.bce_with_logits(logits, t)}

    return TrainResult(net, _run(net, config, len(ids), step, {"s": 1.0}, on_epoch))


def train(net: Network, train_set: Sequence[SampleRecord], config: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    if net.config.variant == "relation":
        return train_relation(net, train_set, config, on_epoch)
    return train_vanilla(net, train_set, config, on_epoch)
