"""Gaussian variational parameters, weight priors and the complexity cost.

A weight tensor is represented by a mean ``mu`` and an unconstrained spread
``rho``; its standard deviation is ``softplus(rho)`` so it stays positive.
Samples are reparameterised, ``theta = mu + softplus(rho) * eps``, and stay on
the autodiff tape so gradients reach both ``mu`` and ``rho``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Prior:
    """Zero-mean weight prior: a single Gaussian or a two-scale mixture."""

    kind: str = "mixture"
    tau: float = 1.0
    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 0.0025

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.tau > 0:
                raise ContractError(f"prior tau must be positive, got {self.tau}")
        elif self.kind == "mixture":
            if not 0.0 <= self.pi <= 1.0:
                raise ContractError(f"mixture weight must lie in [0, 1], got {self.pi}")
            if not self.sigma1 > self.sigma2 > 0:
                raise ContractError(
                    f"mixture needs sigma1 > sigma2 > 0, got {self.sigma1}, {self.sigma2}"
                )
        else:
            raise ContractError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def gaussian(cls, tau: float) -> "Prior":
        return cls(kind="gaussian", tau=tau)

    @classmethod
    def mixture(cls, pi: float, sigma1: float, sigma2: float) -> "Prior":
        return cls(kind="mixture", pi=pi, sigma1=sigma1, sigma2=sigma2)


class VariationalTensor:
    """Mean/spread pair for one weight tensor plus its last drawn sample.

    ``mask`` marks structurally fixed zeros: sampled weights are exactly zero
    there and those entries do not enter the complexity cost.
    """

    def __init__(
        self,
        mu: np.ndarray,
        rho,
        prior: Prior,
        mask: Optional[np.ndarray] = None,
        name: Optional[str] = None,
    ):
        mu = np.array(mu, dtype=np.float64, ndmin=2)
        rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), mu.shape)
        self.mu = Tensor(mu, requires_grad=True, name=f"{name}.mu" if name else None)
        self.rho = Tensor(rho.copy(), requires_grad=True, name=f"{name}.rho" if name else None)
        self.prior = prior
        self.name = name
        self.mask = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(mu.shape)
        if self.mask is not None:
            self.mu.data *= self.mask
        self.epsilon: Optional[np.ndarray] = None
        self.theta: Optional[Tensor] = None

    @property
    def shape(self) -> tuple:
        return self.mu.shape

    @property
    def size(self) -> int:
        return int(self.mu.data.size if self.mask is None else self.mask.sum())

    def sigma(self) -> Tensor:
        return ad.softplus(self.rho)

    def sample(self, rng: Optional[np.random.Generator] = None, epsilon=None) -> Tensor:
        """Draw ``theta = mu + softplus(rho) * eps``; pass ``epsilon`` to freeze the noise."""
        if epsilon is None:
            if rng is None:
                raise ContractError("sample needs an rng or an explicit epsilon")
            epsilon = rng.standard_normal(self.shape)
        epsilon = np.asarray(epsilon, dtype=np.float64).reshape(self.shape)
        theta = self.mu + self.sigma() * Tensor(epsilon)
        if self.mask is not None:
            theta = theta * Tensor(self.mask)
        self.epsilon = epsilon
        self.theta = theta
        return theta

    def use_mean(self) -> Tensor:
        """Set the cached weight to the posterior mean (no noise)."""
        self.epsilon = np.zeros(self.shape)
        self.theta = self.mu if self.mask is None else self.mu * Tensor(self.mask)
        return self.theta

    def value(self) -> Tensor:
        if self.theta is None:
            raise ContractError(f"variational tensor {self.name!r} used before sampling")
        return self.theta

    def parameters(self) -> list:
        return [self.mu, self.rho]

    def apply_mask(self) -> None:
        if self.mask is not None:
            self.mu.data *= self.mask


def sample(vt: VariationalTensor, rng: np.random.Generator) -> Tensor:
    return vt.sample(rng)


def _masked_sum(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is not None:
        x = x * Tensor(mask)
    return ad.sum(x)


def _gaussian_logpdf(theta: Tensor, sigma: float) -> Tensor:
    # elementwise log N(theta | 0, sigma^2)
    return ad.add_scalar(ad.scale(ad.square(theta), -0.5 / sigma**2), -LOG_SQRT_2PI - math.log(sigma))


def log_q(vt: VariationalTensor, theta: Tensor) -> Tensor:
    """Summed log-density of ``theta`` under the variational Gaussian."""
    if theta.shape != vt.shape:
        raise ShapeError(f"log_q: theta {theta.shape} vs mu {vt.shape}")
    sigma = vt.sigma()
    z = (theta - vt.mu) / sigma
    dens = ad.add_scalar(ad.scale(ad.square(z), -0.5) - ad.log(sigma), -LOG_SQRT_2PI)
    return _masked_sum(dens, vt.mask)


def log_prior(prior: Prior, theta: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Summed log prior density; the mixture uses ``a + softplus(b - a)`` for log-sum-exp."""
    if prior.kind == "gaussian":
        return _masked_sum(_gaussian_logpdf(theta, prior.tau), mask)
    if prior.pi == 1.0:
        return _masked_sum(_gaussian_logpdf(theta, prior.sigma1), mask)
    if prior.pi == 0.0:
        return _masked_sum(_gaussian_logpdf(theta, prior.sigma2), mask)
    a = ad.add_scalar(_gaussian_logpdf(theta, prior.sigma1), math.log(prior.pi))
    b = ad.add_scalar(_gaussian_logpdf(theta, prior.sigma2), math.log1p(-prior.pi))
    return _masked_sum(a + ad.softplus(b - a), mask)


def complexity_cost(vts: Sequence[VariationalTensor], thetas: Sequence[Tensor]) -> Tensor:
    """Sum over tensors of ``log q(theta) - log P(theta)``."""
    if len(vts) != len(thetas):
        raise ContractError(f"complexity_cost: {len(vts)} tensors but {len(thetas)} samples")
    total = Tensor(0.0)
    for vt, theta in zip(vts, thetas):
        total = total + (log_q(vt, theta) - log_prior(vt.prior, theta, vt.mask))
    return total

