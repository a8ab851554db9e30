"""Synthetic sample extraction from a trained teacher.

Each of ``M`` mini-batches starts from ``N`` Gaussian inputs with uniformly
drawn labels and takes ``T`` input-gradient steps on the extraction loss,
jointly over the whole mini-batch since the contrastive term couples samples.
CAKE uses plain descent steps whose size decays geometrically across
mini-batches; LAKE adds Langevin noise ``sqrt(2 eta) * eps`` to every step.

Mini-batch ``m`` draws all of its randomness from ``default_rng([seed, m])``,
so mini-batches can run in any order or concurrently and still give the same
bytes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DivergenceError, DomainError
from .losses import LossWeights, extraction_loss
from .models import Network

log = logging.getLogger(__name__)

VARIANTS = ("cake", "lake")


@dataclass(frozen=True)
class ExtractionConfig:
    iterations: int = 256
    minibatches: int = 500
    batch_size: int = 256
    eta0: float = 0.1
    decay_decades: float = 4.0
    variant: str = "cake"
    weights: LossWeights = field(default_factory=LossWeights)
    num_classes: int = 10
    input_shape: tuple[int, ...] = (1, 32, 32)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.minibatches < 1 or self.batch_size < 1 or self.num_classes < 1:
            raise ConfigError("minibatches, batch_size and num_classes must be positive")
        if not (math.isfinite(self.eta0) and self.eta0 > 0):
            raise ConfigError(f"eta0 must be finite and positive, got {self.eta0}")
        if not (math.isfinite(self.decay_decades) and self.decay_decades >= 0):
            raise ConfigError(f"decay_decades must be >= 0, got {self.decay_decades}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExtractionConfig:
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


@dataclass
class SyntheticDataset:
    samples: np.ndarray  # (M*N, *input_shape) float32
    labels: np.ndarray  # (M*N,) int64
    minibatches: int
    batch_size: int
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.minibatches * self.batch_size
        if len(self.samples) != n or len(self.labels) != n:
            raise ConfigError(
                f"expected {n} samples and labels, got {len(self.samples)} and {len(self.labels)}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])


def minibatch_rng(seed: int, m: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(m)])


def sample_priors(
    n: int, input_shape: Sequence[int], num_classes: int, rng: np.random.Generator
) -> tuple[Tensor, np.ndarray]:
    """Standard-normal inputs and uniform categorical labels."""
    if n < 1:
        raise DomainError(f"need at least one sample, got {n}")
    x = rng.standard_normal((n, *input_shape), dtype=np.float32)
    y = rng.integers(0, num_classes, size=n)
    return Tensor(x), y


def step_schedule(m: int, cfg: ExtractionConfig) -> float:
    """Step size for mini-batch ``m`` (1-based): geometric decay from ``eta0``
    over ``decay_decades`` orders of magnitude across the run."""
    M = cfg.minibatches
    if not 1 <= m <= M:
        raise DomainError(f"mini-batch index {m} outside [1, {M}]")
    if M == 1:
        return cfg.eta0
    return cfg.eta0 * 10.0 ** (-cfg.decay_decades * (m - 1) / (M - 1))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def cake_step(x, grad, eta: float) -> Tensor:
    x, grad = _arr(x), _arr(grad)
    return Tensor(x - x.dtype.type(eta) * grad, dtype=x.dtype)


def langevin_step(x, grad, eta: float, rng: np.random.Generator) -> Tensor:
    if eta < 0:
        raise DomainError(f"step size must be >= 0, got {eta}")
    x, grad = _arr(x), _arr(grad)
    noise = rng.standard_normal(x.shape, dtype=np.float64).astype(x.dtype)
    t = x.dtype.type
    return Tensor(x - t(eta) * grad + t(math.sqrt(2.0 * eta)) * noise, dtype=x.dtype)


def frozen(net: Network) -> Network:
    """A view of ``net`` sharing parameter arrays but recording no parameter
    gradients, so synthesis never writes to the teacher."""
    params = [Tensor(p.data, dtype=p.data.dtype) for p in net.params]  # same arrays, no copy
    return Network(list(net.layers), params, tuple(net.input_shape), net.num_classes, net.name)


@dataclass
class MinibatchResult:
    samples: np.ndarray
    labels: np.ndarray
    eta: float
    losses: list[float]


def synthesize_minibatch(teacher: Network, cfg: ExtractionConfig, seed: int, m: int) -> MinibatchResult:
    """Run the ``T`` update steps for mini-batch ``m`` (1-based).

    ``losses`` holds the extraction loss before each step plus one final value
    after the last step (``T + 1`` entries, or one when ``T == 0``).
    """
    rng = minibatch_rng(seed, m)
    x, y = sample_priors(cfg.batch_size, cfg.input_shape, cfg.num_classes, rng)
    eta = step_schedule(m, cfg)
    losses: list[float] = []
    for t in range(1, cfg.iterations + 1):
        xt = Tensor(x.data, requires_grad=True)
        loss = extraction_loss(xt, teacher(xt), y, cfg.weights)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(m, t, "loss")
        loss.backward()
        grad = xt.grad
        if grad is None:
            grad = np.zeros_like(xt.data)
        elif not np.all(np.isfinite(grad)):
            raise DivergenceError(m, t, "gradient")
        losses.append(value)
        if cfg.variant == "lake":
            x = langevin_step(xt, grad, eta, rng)
        else:
            x = cake_step(xt, grad, eta)
    final = extraction_loss(x, teacher(x), y, cfg.weights)
    losses.append(float(final.data))
    if not np.all(np.isfinite(x.data)):
        raise DivergenceError(m, cfg.iterations, "sample")
    return MinibatchResult(x.data, y, eta, losses)


def synthesize(teacher: Network, cfg: ExtractionConfig, seed: int, jobs: int = 1) -> SyntheticDataset:
    """Generate ``M * N`` synthetic samples from ``teacher``.

    ``jobs > 1`` runs mini-batches on a thread pool; the output is identical
    to the serial run.
    """
    if tuple(teacher.input_shape) != tuple(cfg.input_shape):
        raise ConfigError(f"teacher input shape {teacher.input_shape} != config input shape {cfg.input_shape}")
    if teacher.num_classes != cfg.num_classes:
        raise ConfigError(f"teacher has {teacher.num_classes} classes, config says {cfg.num_classes}")
    view = frozen(teacher)
    indices = range(1, cfg.minibatches + 1)

    def run(m: int) -> MinibatchResult:
        res = synthesize_minibatch(view, cfg, seed, m)
        log.info("mini-batch %d/%d eta=%.3g loss %.4g -> %.4g", m, cfg.minibatches, res.eta, res.losses[0], res.losses[-1])
        return res

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, indices))
    else:
        results = [run(m) for m in indices]

    meta = {
        "config": cfg.to_dict(),
        "seed": int(seed),
        "etas": [r.eta for r in results],
        "final_losses": [r.losses[-1] for r in results],
    }
    return SyntheticDataset(
        samples=np.concatenate([r.samples for r in results]),
        labels=np.concatenate([r.labels for r in results]).astype(np.int64),
        minibatches=cfg.minibatches,
        batch_size=cfg.batch_size,
        num_classes=cfg.num_classes,
        meta=meta,
    )
