"""Diagonal Gaussians: reparameterised sampling, log-density, closed-form KL."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


@dataclass
class GaussianParams:
    """Mean and log-variance of a diagonal Gaussian; the last axis is the event dimension."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = T.as_tensor(self.mean)
        self.log_var = T.as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(f"GaussianParams: mean {self.mean.shape} vs log_var {self.log_var.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mean.detach(), self.log_var.detach())

    def take(self, index) -> "GaussianParams":
        """Plain (non-differentiable) indexing along the leading axes."""
        return GaussianParams(Tensor(self.mean.data[index]), Tensor(self.log_var.data[index]))


@dataclass(frozen=True)
class StandardNormalPrior:
    dim: int

    def params(self, batch_shape: tuple[int, ...] = ()) -> GaussianParams:
        z = np.zeros(batch_shape + (self.dim,))
        return GaussianParams(Tensor(z), Tensor(z.copy()))


def _check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def reparam_sample(params: GaussianParams, noise) -> Tensor:
    """mean + exp(0.5 * log_var) * noise."""
    noise = T.as_tensor(noise)
    if noise.shape != params.mean.shape:
        raise ShapeError(f"reparam_sample: noise {noise.shape} vs params {params.mean.shape}")
    return params.mean + T.exp(params.log_var * 0.5) * noise


def log_pdf(x, params: GaussianParams) -> Tensor:
    """Log-density summed over the last axis."""
    x = T.as_tensor(x)
    _check("log_pdf", x, params.mean)
    T._broadcast_shape("log_pdf", x, params.mean)
    diff2 = T.square(x - params.mean)
    terms = (params.log_var + diff2 * T.exp(params.log_var * -1.0) + LOG_2PI) * -0.5
    return T.tsum(terms, axis=-1)


def kl_diag(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    _check("kl_diag", q.mean, p.mean)
    T._broadcast_shape("kl_diag", q.mean, p.mean)
    inv_var_p = T.exp(p.log_var * -1.0)
    ratio = (T.exp(q.log_var) + T.square(q.mean - p.mean)) * inv_var_p
    return T.tsum((p.log_var - q.log_var + ratio - 1.0) * 0.5, axis=-1)


def kl_to_standard(q: GaussianParams) -> Tensor:
    """KL(q || N(0, I)), fused."""
    terms = (T.exp(q.log_var) + T.square(q.mean) - q.log_var - 1.0) * 0.5
    return T.tsum(terms, axis=-1)


def bernoulli_log_prob(x, logits: Tensor) -> Tensor:
    """log p(x | sigmoid(logits)) summed over the last axis, via x*l - softplus(l)."""
    x = T.as_tensor(x)
    _check("bernoulli_log_prob", x, logits)
    return T.tsum(x * logits - T.softplus(logits), axis=-1)


def kl_diag_numpy(q_mean, q_log_var, p_mean, p_log_var) -> np.ndarray:
    """Array-level KL for read-only callers (no tape)."""
    return 0.5 * np.sum(
        p_log_var - q_log_var + (np.exp(q_log_var) + (q_mean - p_mean) ** 2) * np.exp(-p_log_var) - 1.0,
        axis=-1,
    )
