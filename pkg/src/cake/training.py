"""Teacher and student optimisation loops."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledDataset
from .errors import ConfigError, ContractError, DomainError
from .losses import LossWeights, cross_entropy, student_loss
from .models import Network
from .synthesis import SyntheticDataset

SCHEDULES = ("onecycle", "constant")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr_max: float = 0.5
    weight_decay: float = 1e-4
    schedule: str = "onecycle"
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    pct_start: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        for name in ("lr_max", "div_factor", "final_div_factor"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if not (0 <= self.weight_decay < math.inf):
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.pct_start < 1:
            raise ConfigError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")


@dataclass
class Metrics:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    final_test_acc: float | None = None
    seconds: float = 0.0

    def report(self) -> str:
        lines = ["epoch,train_loss,train_acc,test_acc"]
        for i, (l, a) in enumerate(zip(self.train_loss, self.train_acc)):
            t = self.test_acc[i] if i < len(self.test_acc) else float("nan")
            lines.append(f"{i + 1},{l:.6f},{a:.4f},{t:.4f}")
        if self.final_test_acc is not None:
            lines.append(f"final_test_acc,{self.final_test_acc:.4f}")
        return "\n".join(lines) + "\n"


def _cosine(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1 + math.cos(math.pi * frac)) / 2


def onecycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Two cosine phases: ``lr_max/div_factor -> lr_max`` over the first
    ``pct_start`` of the steps, then ``lr_max -> lr_max/final_div_factor``.

    The peak sits on the integer step nearest ``pct_start * (total_steps - 1)``
    so it is hit exactly once.
    """
    if total_steps < 1:
        raise DomainError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step < total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps})")
    if cfg.schedule == "constant":
        return cfg.lr_max
    start = cfg.lr_max / cfg.div_factor
    end = cfg.lr_max / cfg.final_div_factor
    last = total_steps - 1
    if last == 0:
        return start
    peak = max(1, round(cfg.pct_start * last))
    if step <= peak:
        return _cosine(start, cfg.lr_max, step / peak)
    return _cosine(cfg.lr_max, end, (step - peak) / (last - peak))


def sgd_update(params: Network | Sequence[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In place ``theta <- theta - lr * (grad + weight_decay * theta)``."""
    if isinstance(params, Network):
        params = params.parameters()
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter of shape {p.shape} has no gradient")
    for p in params:
        step = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.data -= np.asarray(lr * step, dtype=p.data.dtype)


def predict_logits(net: Network, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(inputs), batch_size):
            out.append(net(Tensor(inputs[i : i + batch_size])).data)
    if not out:
        return np.zeros((0, net.num_classes), dtype=np.float32)
    return np.concatenate(out)


def evaluate(net: Network, data: LabeledDataset, batch_size: int = 1024) -> float:
    """Fraction of samples whose arg-max logit equals the label (ties go to the
    lower class index)."""
    if len(data) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    pred = predict_logits(net, data.inputs, batch_size).argmax(axis=1)
    return float(np.mean(pred == data.labels))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _fit(net, inputs, labels, cfg, loss_fn, test) -> Metrics:
    n = len(labels)
    if n == 0:
        raise DomainError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    metrics = Metrics()
    t0 = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        loss_sum, correct = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            net.zero_grad()
            z = net(Tensor(inputs[idx]))
            loss = loss_fn(z, idx)
            loss.backward()
            sgd_update(net, onecycle_lr(step, total, cfg), cfg.weight_decay)
            step += 1
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(z.data.argmax(axis=1) == labels[idx]))
        metrics.train_loss.append(loss_sum / n)
        metrics.train_acc.append(correct / n)
        if test is not None:
            metrics.test_acc.append(evaluate(net, test))
    net.zero_grad()
    if test is not None:
        metrics.final_test_acc = metrics.test_acc[-1] if metrics.test_acc else evaluate(net, test)
    metrics.seconds = time.perf_counter() - t0
    return metrics


def train_classifier(
    net: Network, data: LabeledDataset, cfg: TrainConfig, test: LabeledDataset | None = None
) -> Metrics:
    """Mini-batch SGD on hard-label cross-entropy over seeded shuffled epochs."""
    if len(data) == 0:
        raise DomainError("cannot train on an empty dataset")
    if data.labels.max() >= net.num_classes or data.labels.min() < 0:
        raise DomainError(f"labels outside [0, {net.num_classes})")
    return _fit(net, data.inputs, data.labels, cfg, lambda z, idx: cross_entropy(z, data.labels[idx]), test)


def train_student(
    student: Network,
    teacher: Network,
    synth: SyntheticDataset,
    cfg: TrainConfig,
    w: LossWeights,
    test: LabeledDataset | None = None,
) -> Metrics:
    """Distil ``teacher`` into ``student`` using only the synthetic samples.

    The synthetic labels serve as hard targets and the teacher's logits on the
    synthetic inputs as soft targets.  The teacher is only ever evaluated.
    """
    if student.num_classes != teacher.num_classes or student.num_classes != synth.num_classes:
        raise ConfigError(
            f"class counts disagree: student {student.num_classes}, teacher {teacher.num_classes}, "
            f"synthetic data {synth.num_classes}"
        )
    if tuple(student.input_shape) != tuple(teacher.input_shape):
        raise ConfigError(f"student input {student.input_shape} != teacher input {teacher.input_shape}")
    z_t = predict_logits(teacher, synth.samples)
    labels = synth.labels
    return _fit(student, synth.samples, labels, cfg, lambda z, idx: student_loss(z, labels[idx], z_t[idx], w), test)
