"""Scalar objectives for student training and sample synthesis.

All losses take and return autodiff tensors so they can be backpropagated to
network parameters (student training) or to the inputs (synthesis).  Batch
reductions are means.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class LossWeights:
    """Weights and temperatures for both the synthesis and the student objective.

    ``lambda_cls``, ``lambda_contr``, ``lambda_tv`` and ``tau_synth`` shape the
    extraction loss; ``lambda1``, ``lambda2`` and ``tau_student`` shape the
    student objective (hard-label term and soft-label term respectively).
    """

    lambda_cls: float = 1e3
    lambda_contr: float = 1e1
    lambda_tv: float = 1e5
    tau_synth: float = 4.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau_student: float = 4.0
    scale_soft_by_tau2: bool = True

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_contr", "lambda_tv", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and non-negative, got {v}")
        for name in ("tau_synth", "tau_student"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 1:
                raise DomainError(f"{name} must be a finite temperature >= 1, got {v}")

    def replace(self, **changes) -> LossWeights:
        return LossWeights(**{**asdict(self), **changes})


def _as_tensor(z) -> Tensor:
    return z if isinstance(z, Tensor) else Tensor(z)


def _check_labels(y, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def one_hot(y: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(y), num_classes), dtype=dtype)
    out[np.arange(len(y)), y] = 1
    return out


def log_softened(z: Tensor, tau: float) -> Tensor:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    return ad.log_softmax(z if tau == 1 else ad.scale(z, 1.0 / tau))


def softened_softmax(z, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``z / tau``."""
    return ad.exp(log_softened(_as_tensor(z), tau))


def soft_cross_entropy(target: np.ndarray, log_q: Tensor) -> Tensor:
    """Batch mean of ``-sum_k target_k log q_k``; ``target`` is a constant."""
    t = Tensor(target, dtype=log_q.dtype)
    return ad.scale(ad.sum_(ad.mul(t, log_q)), -1.0 / log_q.shape[0])


def cross_entropy(z: Tensor, y, tau: float = 1.0) -> Tensor:
    """Hard-label cross-entropy of ``softmax(z / tau)``, batch mean."""
    z = _as_tensor(z)
    y = _check_labels(y, z.shape[0], z.shape[1])
    return soft_cross_entropy(one_hot(y, z.shape[1], z.dtype), log_softened(z, tau))


def student_loss(z_s: Tensor, y, z_t, w: LossWeights) -> Tensor:
    """Hard-label term on ``y`` plus soft-label term against the teacher logits.

    ``lambda1 * CE(y, p(z_s, 1)) + lambda2 * tau^2 * CE(p(z_t, tau), p(z_s, tau))``
    where the ``tau^2`` factor is dropped when ``w.scale_soft_by_tau2`` is off.
    ``z_t`` is treated as a constant.
    """
    z_t = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=z_s.dtype)
    if z_t.shape != z_s.shape:
        raise DimensionError(f"student logits {z_s.shape} and teacher logits {z_t.shape} differ")
    y = _check_labels(y, z_s.shape[0], z_s.shape[1])
    terms = []
    if w.lambda1:
        terms.append(ad.scale(cross_entropy(z_s, y), w.lambda1))
    if w.lambda2:
        tau = w.tau_student
        p_t = softened_softmax(Tensor(z_t, dtype=z_s.dtype), tau).data
        soft = soft_cross_entropy(p_t, log_softened(z_s, tau))
        terms.append(ad.scale(soft, w.lambda2 * (tau * tau if w.scale_soft_by_tau2 else 1.0)))
    if not terms:
        return ad.scale(ad.sum_(z_s), 0.0)
    return terms[0] if len(terms) == 1 else ad.add(*terms)


def contrastive_loss(z: Tensor, y) -> Tensor:
    """Mean over all unordered pairs i<j of ``[y_i != y_j] * ||z_i - z_j||^2``.

    Same-label pairs count toward the denominator with value 0, so the loss is
    zero when every sample shares one label (or the batch has a single row).
    """
    z = _as_tensor(z)
    y = np.asarray(y)
    b = z.shape[0]
    if y.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {y.shape}")
    if b < 2:
        return ad.scale(ad.sum_(z), 0.0)
    mask = np.triu(y[:, None] != y[None, :], k=1).astype(z.dtype)
    dist = ad.pairwise_sqdist(z)
    return ad.scale(ad.sum_(ad.mul(Tensor(mask, dtype=z.dtype), dist)), 2.0 / (b * (b - 1)))


def tv_loss(x: Tensor) -> Tensor:
    """Anisotropic L1 total variation of (B,C,H,W) images, summed per sample
    over channels and pixels, averaged over the batch."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"tv_loss expects (B,C,H,W), got {x.shape}")
    b = x.shape[0]
    total = None
    for axis in (2, 3):
        if x.shape[axis] < 2:
            continue
        term = ad.sum_(ad.abs_(ad.diff(x, axis)))
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.scale(ad.sum_(x), 0.0)
    return ad.scale(total, 1.0 / b)


def extraction_loss(x: Tensor, z_t: Tensor, y, w: LossWeights, use_tv: bool | None = None) -> Tensor:
    """Weighted synthesis objective on teacher logits ``z_t`` of samples ``x``.

    ``lambda_cls * tau^2 * CE(y, p(z_t, tau)) + lambda_contr * contrastive
    + lambda_tv * TV(x)`` with ``tau = tau_synth``.  TV only applies to image
    batches; ``use_tv=None`` decides from the rank of ``x``.
    """
    if use_tv is None:
        use_tv = x.data.ndim == 4
    terms = []
    if w.lambda_cls:
        tau = w.tau_synth
        terms.append(ad.scale(cross_entropy(z_t, y, tau), w.lambda_cls * tau * tau))
    if w.lambda_contr:
        terms.append(ad.scale(contrastive_loss(z_t, y), w.lambda_contr))
    if w.lambda_tv and use_tv:
        terms.append(ad.scale(tv_loss(x), w.lambda_tv))
    if not terms:
        return ad.scale(ad.sum_(z_t), 0.0)
    loss = terms[0]
    for t in terms[1:]:
        loss = ad.add(loss, t)
    return loss
