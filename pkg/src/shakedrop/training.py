"""SGD with Nesterov momentum, a step learning-rate schedule, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from shakedrop import ops
from shakedrop.autograd import Parameter, backward, no_grad
from shakedrop.data import AugmentConfig, LabeledImageSet, augment, mixup, normalize, one_hot
from shakedrop.metrics import MetricsRecord
from shakedrop.models import Network
from shakedrop.rng import AUGMENT, MIXUP, SHUFFLE, RandomStreams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    batch_size: int = 128
    decay_all: bool = True

    def __post_init__(self):
        vals = (self.base_lr, self.momentum, self.weight_decay)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("optimizer fields must be finite")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LRSchedule:
    """Multiply the base rate by ``factor`` at every milestone epoch."""

    total_epochs: int = 60
    milestones: tuple[int, ...] = (30, 45)
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.total_epochs < 0:
            raise ValueError("total_epochs must be >= 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] < 0 or ms[-1] >= max(self.total_epochs, 1)):
            raise ValueError("milestones must lie in [0, total_epochs)")
        if not (math.isfinite(self.factor) and self.factor > 0):
            raise ValueError("factor must be positive")


def lr_at(epoch: int, schedule: LRSchedule, base_lr: float) -> float:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return base_lr * schedule.factor ** passed


class MetricsSink(Protocol):
    def append(self, record: MetricsRecord) -> None: ...


class SGD:
    """Holds one velocity buffer per parameter.

    With ``decay_all`` off, one-dimensional parameters (biases and batch-norm
    scale/shift) are exempt from weight decay.
    """

    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.decay = [config.decay_all or p.ndim > 1 for p in self.params]

    def step(self, lr: float) -> bool:
        return sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.config, lr,
                        self.decay)


def sgd_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], velocity: Sequence[np.ndarray],
             config: OptimizerConfig, lr: float, decay: Optional[Sequence[bool]] = None) -> bool:
    """One update; returns False (and changes nothing but the gradients) on a non-finite gradient.

    ``g += wd*w``; ``v = mu*v - lr*g``; then ``w += mu*v - lr*g`` (Nesterov)
    or ``w += v`` (classical momentum). Gradients are zeroed afterwards.
    ``decay`` marks which parameters receive weight decay (default: all).
    """
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ValueError("params, grads and velocity must align")
    decay = [True] * len(params) if decay is None else list(decay)
    ok = all(np.all(np.isfinite(g)) for g in grads)
    if ok:
        mu, wd = config.momentum, config.weight_decay
        for p, g, v, d in zip(params, grads, velocity, decay):
            if v.shape != p.shape:
                raise ValueError("velocity shape does not match parameter")
            g = g + wd * p.data if wd and d else g
            v *= mu
            v -= lr * g
            if config.nesterov:
                p.data = p.data + mu * v - lr * g
            else:
                p.data = p.data + v
    for p in params:
        p.zero_grad()
    return ok


def _top1_errors(logits: np.ndarray, labels: np.ndarray) -> int:
    # np.argmax breaks ties toward the lowest class index
    target = labels if labels.ndim == 1 else labels.argmax(axis=1)
    return int((logits.argmax(axis=1) != target).sum())


def evaluate(network: Network, dataset: LabeledImageSet, batch_size: int = 256,
             mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Mean cross-entropy and top-1 error (%) in evaluation phase; draws nothing."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = network.training
    network.eval()
    total_loss, wrong = 0.0, 0
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                x = dataset.images[start:start + batch_size]
                y = dataset.labels[start:start + batch_size]
                if mean is not None:
                    x = normalize(x, mean, std)
                logits = network(x)
                total_loss += float(ops.softmax_cross_entropy(logits, y).data) * len(y)
                wrong += _top1_errors(logits.data, y)
    finally:
        network.train(was_training)
    n = len(dataset)
    return total_loss / n, 100.0 * wrong / n


@dataclass
class TrainOptions:
    """Knobs of :func:`train` beyond the optimizer and schedule."""

    seed: int = 0
    workers: int = 1
    augment: Optional[AugmentConfig] = None
    normalize: bool = True
    record_wall_time: bool = False
    eval_batch_size: int = 256


def train(network: Network, train_set: LabeledImageSet, eval_set: Optional[LabeledImageSet],
          optimizer: OptimizerConfig, schedule: LRSchedule, options: Optional[TrainOptions] = None,
          sinks: Sequence[MetricsSink] = (), clock: Callable[[], float] = time.perf_counter,
          ) -> list[MetricsRecord]:
    """Run the epoch loop and return one record per completed (or diverged) epoch.

    Each epoch shuffles the training split, runs every minibatch (the last
    partial one included) in the training phase, then evaluates. With
    ``workers = R > 1`` each minibatch is split into R shards that use
    independent regularizer streams; their gradients are averaged before
    the step. A non-finite loss or gradient aborts the step and halts
    training with the metrics gathered so far.
    """
    opts = options or TrainOptions()
    if opts.workers < 1:
        raise ValueError("workers must be >= 1")
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if optimizer.batch_size > len(train_set):
        raise ValueError("batch_size exceeds dataset size")
    streams = RandomStreams(opts.seed)
    network.streams = streams
    shuffle_rng = streams.generator(SHUFFLE)
    aug_rng = streams.generator(AUGMENT)
    mix_rng = streams.generator(MIXUP)
    sgd = SGD(network.parameters(), optimizer)
    mean, std = (train_set.mean, train_set.std) if opts.normalize else (None, None)
    aug = opts.augment or AugmentConfig(flip_probability=0.0, pad=0, crop=None)
    k = train_set.num_classes
    bns = list(network.batchnorms())
    t0 = clock()
    records: list[MetricsRecord] = []

    for epoch in range(schedule.total_epochs):
        lr = lr_at(epoch, schedule, optimizer.base_lr)
        network.train()
        order = shuffle_rng.permutation(len(train_set))
        loss_sum, wrong, seen = 0.0, 0, 0
        diverged = False
        for start in range(0, len(order), optimizer.batch_size):
            idx = order[start:start + optimizer.batch_size]
            x = augment(train_set.images[idx], aug, aug_rng, mean=mean, std=std)
            y = train_set.labels[idx]
            target = y
            if aug.mixup_alpha:
                x, target = mixup(x, one_hot(y, k), aug.mixup_alpha, mix_rng)
            network.step += 1
            shards = np.array_split(np.arange(len(idx)), min(opts.workers, len(idx)))
            batch_loss = 0.0
            saved_stats = [(bn.state.running_mean, bn.state.running_var) for bn in bns]
            # overflow is detected below through the loss, so numpy's warnings are noise
            with np.errstate(over="ignore", invalid="ignore"):
                for replica, shard in enumerate(shards):
                    network.replica = replica
                    logits = network(x[shard])
                    loss = ops.softmax_cross_entropy(logits, target[shard])
                    backward(loss)
                    batch_loss += float(loss.data) * len(shard)
                    wrong += _top1_errors(logits.data, target[shard])
                network.replica = 0
                if len(shards) > 1:
                    for p in sgd.params:
                        p.grad = p.grad / len(shards)
                stepped = math.isfinite(batch_loss) and sgd.step(lr)
            if not stepped:
                for p in sgd.params:
                    p.zero_grad()
                for bn, (mean_, var_) in zip(bns, saved_stats):
                    bn.state.running_mean, bn.state.running_var = mean_, var_
                diverged = True
                loss_sum = float("nan")
                seen += len(idx)
                log.warning("non-finite loss at epoch %d; step aborted", epoch)
                break
            loss_sum += batch_loss
            seen += len(idx)
        if eval_set is not None and len(eval_set) and not diverged:
            with np.errstate(over="ignore", invalid="ignore"):
                eval_loss, eval_err = evaluate(network, eval_set, opts.eval_batch_size, mean, std)
        else:
            eval_loss, eval_err = float("nan"), float("nan")
        elapsed = clock() - t0 if opts.record_wall_time else 0.0
        rec = MetricsRecord(epoch, loss_sum / seen, 100.0 * wrong / seen, eval_loss, eval_err,
                            lr, elapsed, diverged)
        records.append(rec)
        for sink in sinks:
            sink.append(rec)
        log.info("epoch %d lr=%.4g train_loss=%.4f train_top1=%.2f eval_loss=%.4f eval_top1=%.2f",
                 epoch, lr, rec.train_loss, rec.train_top1_error, eval_loss, eval_err)
        if diverged:
            break
    return records
