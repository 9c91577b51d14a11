"""Adamax updates and global-norm gradient clipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamaxMoments:
    """First moment ``m``, infinity-norm moment ``u`` and the shared step count."""

    m: list[np.ndarray]
    u: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamaxMoments:
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adamax_step(params, grads, moments: AdamaxMoments, lr: float = 8e-4,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[int]:
    """Apply one in-place Adamax update.

    ``grads`` may contain ``None`` for parameters that received no gradient;
    those are treated as zero. A parameter whose gradient holds a non-finite
    value is left untouched along with its moments. Returns the indices of the
    skipped parameters.
    """
    if not (len(params) == len(grads) == len(moments.m) == len(moments.u)):
        raise ValueError("params, grads and moments must have equal length")
    moments.step += 1
    correction = lr / (1.0 - beta1 ** moments.step)
    skipped = []
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape or moments.m[i].shape != data.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {data.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for parameter %d; update skipped", i)
            skipped.append(i)
            continue
        m, u = moments.m[i], moments.u[i]
        m *= beta1
        m += (1.0 - beta1) * g
        np.maximum(beta2 * u, np.abs(g), out=u)
        data -= (correction * m / (u + eps)).astype(data.dtype, copy=False)
    return skipped


class Adamax:
    """Adamax bound to a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 8e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = AdamaxMoments.zeros_like(self.params)

    def step(self) -> list[int]:
        return adamax_step(self.params, [p.grad for p in self.params], self.moments,
                           lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm
