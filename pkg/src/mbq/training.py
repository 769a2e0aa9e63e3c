"""Batch-wise and bit-wise training schedules, BN adaptation and calibration."""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, augment_batch, epoch_batches, stream_rng
from .model import BNPolicy, MultiBitModel, child_forward

log = logging.getLogger(__name__)

# bit tag used when a probe receives the cross-bit aggregated error signal
AGGREGATE_BIT = 0


class Scheme(str, enum.Enum):
    BATCH_WISE = "batch_wise"
    BIT_WISE = "bit_wise"


class LRSchedule(str, enum.Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    STEP = "step"


@dataclass
class TrainConfig:
    scheme: Scheme = Scheme.BATCH_WISE
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: LRSchedule = LRSchedule.COSINE
    milestones: tuple = ()
    gamma: float = 0.1
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.lr_schedule = LRSchedule(self.lr_schedule)
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 1, batch_size >= 1 and lr > 0 are required")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        if self.lr_schedule is LRSchedule.COSINE:
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))
        if self.lr_schedule is LRSchedule.STEP:
            drops = sum(1 for m in self.milestones if epoch > m)
            return self.lr * self.gamma**drops
        return self.lr


@dataclass
class MetricsRecord:
    epoch: int
    bit: int
    split: str
    loss: float
    accuracy: float
    wall_seconds: float
    samples_seen: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def write_metrics(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


class SGD:
    """Momentum SGD; weight decay only on tensors flagged for it."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: dict = {}

    def step(self, params, lr: float) -> None:
        for t, decay in params:
            if t.grad is None:
                continue
            g = t.grad
            if decay and self.weight_decay:
                g = g + self.weight_decay * t.data
            buf = self._buf.get(id(t))
            buf = g if buf is None else self.momentum * buf + g
            self._buf[id(t)] = buf
            t.data = (t.data - lr * buf).astype(np.float32)
            t.grad = None


def _trainable(model: MultiBitModel, bits) -> list:
    params = [(t, True) for t in model.theta.values()]
    params += [(t, False) for t in model.bn_parameters(bits)]
    return params


def _zero_grads(params) -> None:
    for t, _ in params:
        t.grad = None


def error_vectors(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample ``softmax(logits) - onehot(y)``."""
    err = ag.softmax(logits)
    err[np.arange(labels.size), labels] -= 1.0
    return err


def joint_loss(model: MultiBitModel, x, y, bits, training: bool = True) -> tuple:
    """Sum of per-bit cross-entropies on one batch.

    Returns ``(total_loss_tensor, {bit: loss_value})``.
    """
    bits = list(bits)
    if not bits:
        raise ValueError("joint_loss needs at least one bit-width")
    for b in bits:
        if b not in model.ranges.trained:
            raise ValueError(f"bit-width {b} not in trained range {list(model.ranges.trained)}")
    total = None
    parts = {}
    for b in bits:
        loss = ag.softmax_cross_entropy(child_forward(model, b, x, training=training), y)
        parts[b] = float(loss.data)
        total = loss if total is None else total + loss
    return total, parts


class _EpochStats:
    def __init__(self, bits):
        self.loss = {b: 0.0 for b in bits}
        self.correct = {b: 0 for b in bits}
        self.seen = {b: 0 for b in bits}

    def add(self, b, loss, logits, labels):
        n = labels.size
        self.loss[b] += loss * n
        self.correct[b] += int(np.sum(np.argmax(logits, axis=1) == labels))
        self.seen[b] += n

    def records(self, epoch, wall):
        return [
            MetricsRecord(
                epoch=epoch,
                bit=b,
                split="train",
                loss=self.loss[b] / max(self.seen[b], 1),
                accuracy=self.correct[b] / max(self.seen[b], 1),
                wall_seconds=wall,
                samples_seen=self.seen[b],
            )
            for b in self.loss
        ]


def _batch(data: Dataset, idx, cfg: TrainConfig, rng) -> tuple:
    x = data.images[idx]
    if cfg.augment and x.ndim == 4:
        x = augment_batch(x, rng)
    return x, data.labels[idx]


def train_batchwise(
    model: MultiBitModel,
    data: Dataset,
    cfg: TrainConfig,
    plan=None,
    bits=None,
    probe: Optional[Callable] = None,
    step_hook: Optional[Callable] = None,
    optimizer: Optional[SGD] = None,
) -> tuple:
    """Every step runs all bits forward/backward and applies one summed update.

    Without ``plan`` all bits share one shuffled pass over ``data`` and the
    probe receives the cross-bit mean error vectors tagged
    :data:`AGGREGATE_BIT`.  With a plan each bit cycles through its own
    shuffled coreset stream; an epoch lasts as long as the longest stream.
    ``step_hook(epoch, step, {bit: {param_name: grad}})`` sees each bit's
    gradient before the update.

    Returns ``(model, [MetricsRecord])``.
    """
    bits = sorted(model.ranges.trained if bits is None else bits)
    params = _trainable(model, bits)
    opt = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    names = {id(t): n for n, t in model.theta.items()}
    aug_rng = np.random.default_rng([cfg.seed, 7919])
    records = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        if plan is None:
            shared = epoch_batches(np.arange(len(data)), cfg.batch_size, stream_rng(cfg.seed, epoch, 0))
            streams = {b: shared for b in bits}
        else:
            streams = {
                b: epoch_batches(plan.indices(b, epoch), cfg.batch_size, stream_rng(cfg.seed, epoch, pos))
                for pos, b in enumerate(bits)
            }
        steps = max(len(s) for s in streams.values())
        stats = _EpochStats(bits)
        for step in range(steps):
            _zero_grads(params)
            per_bit_grads = {}
            agg_err = None
            for b in bits:
                idx = streams[b][step % len(streams[b])]
                x, y = _batch(data, idx, cfg, aug_rng)
                logits = child_forward(model, b, x, training=True)
                loss = ag.softmax_cross_entropy(logits, y)
                grads = ag.backward(loss)
                stats.add(b, float(loss.data), logits.data, y)
                if step_hook is not None:
                    per_bit_grads[b] = {names[id(t)]: g for t, g in grads.items() if id(t) in names}
                if probe is not None:
                    err = error_vectors(logits.data, y)
                    if plan is None:
                        agg_err = err if agg_err is None else agg_err + err
                    else:
                        probe(epoch, b, idx, err)
            if probe is not None and plan is None:
                probe(epoch, AGGREGATE_BIT, idx, agg_err / len(bits))
            if step_hook is not None:
                step_hook(epoch, step, per_bit_grads)
            opt.step(params, lr)
        recs = stats.records(epoch, time.perf_counter() - start)
        records += recs
        log.info("epoch %d: %s", epoch, ", ".join(f"b{r.bit} loss {r.loss:.3f} acc {r.accuracy:.3f}" for r in recs))
    return model, records


def train_bitwise(
    model: MultiBitModel,
    data: Dataset,
    cfg: TrainConfig,
    probe: Optional[Callable] = None,
    bits=None,
    optimizer: Optional[SGD] = None,
) -> tuple:
    """Each epoch trains every bit (ascending) for a full pass with its own loss.

    ``probe(epoch, bit, indices, errors)`` receives the per-sample
    ``softmax - onehot`` vectors from each training forward.
    """
    bits = sorted(model.ranges.trained if bits is None else bits)
    params = _trainable(model, bits)
    opt = optimizer or SGD(cfg.momentum, cfg.weight_decay)
    aug_rng = np.random.default_rng([cfg.seed, 7919])
    records = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        stats = _EpochStats(bits)
        for pos, b in enumerate(bits):
            for idx in epoch_batches(np.arange(len(data)), cfg.batch_size, stream_rng(cfg.seed, epoch, pos)):
                _zero_grads(params)
                x, y = _batch(data, idx, cfg, aug_rng)
                logits = child_forward(model, b, x, training=True)
                loss = ag.softmax_cross_entropy(logits, y)
                ag.backward(loss)
                stats.add(b, float(loss.data), logits.data, y)
                if probe is not None:
                    probe(epoch, b, idx, error_vectors(logits.data, y))
                opt.step(params, lr)
        records += stats.records(epoch, time.perf_counter() - start)
    return model, records


def evaluate(model: MultiBitModel, data: Dataset, b: int, batch_size: int = 500) -> tuple:
    """Top-1 accuracy and mean cross-entropy in inference mode."""
    model.check_bit(b)
    correct, total_loss = 0, 0.0
    with ag.no_grad():
        for i in range(0, len(data), batch_size):
            x, y = data.images[i : i + batch_size], data.labels[i : i + batch_size]
            logits = child_forward(model, b, x, training=False)
            total_loss += float(ag.softmax_cross_entropy(logits, y).data) * y.size
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    n = max(len(data), 1)
    return correct / n, total_loss / n


class _Moments:
    """Streaming per-channel count/mean/M2 with Chan's pairwise merge."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, x: np.ndarray) -> None:
        axes = (0,) + tuple(range(2, x.ndim))
        nb = x.size // x.shape[1]
        mb = np.mean(x, axis=axes, dtype=np.float64)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        m2b = np.sum(np.square(x.astype(np.float64) - mb.reshape(shape)), axis=axes)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta * delta * (self.n * nb / n)
        self.n = n

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.n


def bn_adapt(model: MultiBitModel, data: Dataset, bits, passes: int = 1, batch_size: int = 500) -> MultiBitModel:
    """Recompute BN statistics per bit from forward passes only.

    Statistics are exact (streaming merge over all adaptation activations);
    affine parameters and theta are untouched.  Each bit's statistics are
    stored on its resolved bank as that bit's override; a bank owned by a
    single bit also gets its running estimates replaced.
    """
    if len(data) == 0:
        raise ValueError("bn_adapt: empty adaptation set")
    for b in bits:
        model.check_bit(b)
        acc = {site: _Moments() for site in model.bn_sites()}

        def observe(site, h, acc=acc):
            acc[site].update(h)

        with ag.no_grad():
            for _ in range(passes):
                for i in range(0, len(data), batch_size):
                    child_forward(
                        model, b, data.images[i : i + batch_size],
                        training=True, update_stats=False, observer=observe,
                    )
        owners = {}
        for other in model.ranges.switchable:
            owners.setdefault(model.bank_key(other), set()).add(other)
        for site, mom in acc.items():
            bank = model.bank(site, b)
            mean = mom.mean.astype(np.float32)
            var = mom.var.astype(np.float32)
            bank.bit_stats[b] = (mean, var)
            if owners[model.bank_key(b)] == {b}:
                bank.running_mean, bank.running_var = mean.copy(), var.copy()
    return model


def calibrate_baseline(
    model: MultiBitModel, data: Dataset, bits_to_calibrate, cfg: TrainConfig
) -> MultiBitModel:
    """Switchable-BN calibration for untrained bits (per-bit BN policy only).

    Theta is frozen; only the listed bits' BN banks are trained, for
    ``ceil(cfg.epochs / 3)`` epochs.
    """
    if model.policy is not BNPolicy.PER_BIT:
        raise ValueError(f"calibration requires the per_bit BN policy, model uses {model.policy.value}")
    bits = sorted(bits_to_calibrate)
    untrained = set(model.ranges.switchable) - set(model.ranges.trained)
    if not set(bits) <= untrained:
        raise ValueError(f"bits {bits} must be a subset of the calibrated range {sorted(untrained)}")
    epochs = calibration_epochs(cfg.epochs)
    frozen = [t for t in model.theta.values()]
    for t in frozen:
        t.requires_grad = False
    try:
        for b in bits:
            params = [(t, False) for t in model.bn_parameters([b])]
            opt = SGD(cfg.momentum, 0.0)
            for epoch in range(1, epochs + 1):
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / epochs))
                for idx in epoch_batches(np.arange(len(data)), cfg.batch_size, stream_rng(cfg.seed, epoch, b)):
                    _zero_grads(params)
                    loss = ag.softmax_cross_entropy(
                        child_forward(model, b, data.images[idx], training=True), data.labels[idx]
                    )
                    ag.backward(loss)
                    opt.step(params, lr)
    finally:
        for t in frozen:
            t.requires_grad = True
    return model


def calibration_epochs(train_epochs: int) -> int:
    return int(math.ceil(train_epochs / 3))
