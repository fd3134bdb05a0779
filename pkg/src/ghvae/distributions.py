"""Diagonal Gaussians: reparameterized sampling, log-densities, closed-form KL.

Everything here is a pure function over tensors, so gradients flow wherever the
inputs carry them. A distribution either owns a per-element ``log_std`` tensor
or a single fixed scalar standard deviation (the stabilized posterior case).
Standard deviations are clamped to [STD_MIN, STD_MAX] to keep KL terms sane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

STD_MIN = 1e-3
STD_MAX = 5.0

__all__ = ["DiagonalGaussian", "kl_divergence", "sample_reparam", "gaussian_log_prob",
           "STD_MIN", "STD_MAX"]


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_std: Optional[Tensor] = None
    fixed_std: Optional[float] = None

    def __post_init__(self):
        if (self.log_std is None) == (self.fixed_std is None):
            raise ValueError("exactly one of log_std / fixed_std must be given")
        if self.log_std is not None and self.log_std.shape != self.mean.shape:
            raise T.ShapeError(
                f"log_std shape {self.log_std.shape} != mean shape {self.mean.shape}")
        if self.fixed_std is not None and not self.fixed_std > 0:
            raise ValueError(f"fixed_std must be positive, got {self.fixed_std}")

    @property
    def is_fixed(self) -> bool:
        return self.fixed_std is not None

    def std_tensor(self) -> Tensor:
        """Per-element std as a tensor, clamp applied."""
        if self.is_fixed:
            s = min(max(self.fixed_std, STD_MIN), STD_MAX)
            return Tensor(np.full(self.mean.shape, s, dtype=self.mean.dtype))
        return T.clamp(T.exp(self.log_std), STD_MIN, STD_MAX)

    def std_value(self) -> np.ndarray:
        """Per-element std as plain numpy (no tape)."""
        if self.is_fixed:
            s = min(max(self.fixed_std, STD_MIN), STD_MAX)
            return np.full(self.mean.shape, s, dtype=self.mean.dtype)
        return np.clip(np.exp(self.log_std.data), STD_MIN, STD_MAX)


def _log_std_eff(d: DiagonalGaussian) -> Tensor:
    return T.log(d.std_tensor())


def kl_divergence(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || p), summed over all dimensions.

    Per element: ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2.
    """
    if q.mean.shape != p.mean.shape:
        raise T.ShapeError(f"kl_divergence: shapes {q.mean.shape} != {p.mean.shape}")
    n = q.mean.size
    diff = T.sub(q.mean, p.mean)
    quad = T.mul(diff, diff)
    if q.is_fixed:
        sq = min(max(q.fixed_std, STD_MIN), STD_MAX)
        quad = T.add_scalar(quad, sq * sq)
        log_sq_sum = n * math.log(sq)
    else:
        sq_t = q.std_tensor()
        quad = T.add(quad, T.mul(sq_t, sq_t))
        log_sq_sum = None  # tensor, handled below
    if p.is_fixed:
        sp = min(max(p.fixed_std, STD_MIN), STD_MAX)
        term = T.scale(T.tsum(quad), 1.0 / (2.0 * sp * sp))
        log_sp_sum = n * math.log(sp)
        kl = T.add_scalar(term, log_sp_sum - n * 0.5)
    else:
        ls_p = _log_std_eff(p)
        inv_two_var = T.scale(T.exp(T.scale(ls_p, -2.0)), 0.5)
        term = T.tsum(T.mul(quad, inv_two_var))
        kl = T.add_scalar(T.add(term, T.tsum(ls_p)), -n * 0.5)
    if log_sq_sum is None:
        kl = T.sub(kl, T.tsum(_log_std_eff(q)))
    else:
        kl = T.add_scalar(kl, -log_sq_sum)
    return kl


def sample_reparam(d: DiagonalGaussian, noise: Tensor) -> Tensor:
    """mean + std * noise; gradients reach the parameters, never the noise."""
    if noise.shape != d.mean.shape:
        raise T.ShapeError(f"sample_reparam: noise shape {noise.shape} != mean shape {d.mean.shape}")
    if d.is_fixed:
        s = min(max(d.fixed_std, STD_MIN), STD_MAX)
        return T.add(d.mean, T.scale(noise, s))
    return T.add(d.mean, T.mul(d.std_tensor(), noise))


def gaussian_log_prob(x: Tensor, mean: Tensor, std: float) -> Tensor:
    """Sum over elements of log N(x; mean, std^2) for a scalar std."""
    if x.shape != mean.shape:
        raise T.ShapeError(f"gaussian_log_prob: shapes {x.shape} != {mean.shape}")
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    n = x.size
    diff = T.sub(x, mean)
    ss = T.tsum(T.mul(diff, diff))
    const = -0.5 * n * math.log(2.0 * math.pi * std * std)
    return T.add_scalar(T.scale(ss, -1.0 / (2.0 * std * std)), const)
