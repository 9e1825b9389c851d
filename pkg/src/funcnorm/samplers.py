"""Sampling distributions for the function-norm penalty.

Four kinds are available:

``pool``
    uniform draws (with replacement) from held-out unlabeled rows;
``gaussian_fixed``
    isotropic Gaussian with a given mean and variance in every dimension;
``gaussian_moment_matched``
    diagonal Gaussian with the per-dimension mean and variance of the data;
``kde``
    Gaussian kernel density estimate of the data, using Silverman's rule for
    the bandwidth and multiplying the kernel variance by ``inflation`` so the
    samples have slightly broader support than the data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-8
KINDS = ("pool", "gaussian_fixed", "gaussian_moment_matched", "kde")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "gaussian_moment_matched"
    mean: float = 0.0
    var: float = 1.0
    inflation: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; expected one of {KINDS}")
        if not self.var > 0:
            raise ValueError("gaussian_fixed variance must be positive")
        if not self.inflation >= 1:
            raise ValueError("kde inflation must be >= 1")


class Sampler:
    dim: int

    def draw(self, m: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class PoolSampler(Sampler):
    def __init__(self, pool: np.ndarray):
        self.pool = pool
        self.dim = pool.shape[1]

    def draw(self, m, rng):
        return self.pool[rng.integers(0, len(self.pool), size=m)]


class GaussianSampler(Sampler):
    """Diagonal Gaussian N(mean, diag(var))."""

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.var = np.asarray(var, dtype=np.float64)
        self.dim = self.mean.shape[0]

    def draw(self, m, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((m, self.dim))


class KdeSampler(Sampler):
    """Mixture of diagonal Gaussians centred on the data points."""

    def __init__(self, data: np.ndarray, bandwidth: np.ndarray):
        self.data = data
        self.bandwidth = bandwidth
        self.dim = data.shape[1]

    def draw(self, m, rng):
        centres = self.data[rng.integers(0, len(self.data), size=m)]
        return centres + self.bandwidth * rng.standard_normal((m, self.dim))


def silverman_bandwidth(data: np.ndarray) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidth sigma_j * (4 / ((d + 2) n))^(1 / (d + 4))."""
    n, d = data.shape
    sigma = np.sqrt(np.maximum(data.var(axis=0), VAR_FLOOR))
    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def _as_2d(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("sampler data must be a non-empty (n, d) array")
    return data


def fit(spec: SamplerSpec, data=None, dim: int | None = None) -> Sampler:
    """Build a sampler; ``data`` is the pool for ``pool`` and the fitting set otherwise.

    ``gaussian_fixed`` ignores ``data`` apart from reading its dimension, so
    ``dim`` may be given instead.
    """
    if spec.kind == "gaussian_fixed":
        if dim is None:
            dim = _as_2d(data).shape[1]
        return GaussianSampler(np.full(dim, spec.mean), np.full(dim, spec.var))
    data = _as_2d(data)
    if spec.kind == "pool":
        return PoolSampler(data)
    if spec.kind == "gaussian_moment_matched":
        return GaussianSampler(data.mean(axis=0), np.maximum(data.var(axis=0), VAR_FLOOR))
    return KdeSampler(data, silverman_bandwidth(data) * math.sqrt(spec.inflation))


def draw(sampler: Sampler, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` i.i.d. draws, shape ``(m, d)``."""
    if m < 1:
        raise ValueError("need at least one sample")
    return sampler.draw(m, rng)


def chi2_divergence_term(p_mean, p_var, q_mean, q_var) -> float:
    """Integral of p^2 / q for diagonal Gaussians p and q.

    Per dimension the integral equals
    ``s_q^2 / (s_p * sqrt(2 s_q^2 - s_p^2)) * exp((m_p - m_q)^2 / (2 s_q^2 - s_p^2))``
    and the total is the product over dimensions.  It is finite only when
    ``2 s_q^2 > s_p^2`` in every dimension; otherwise ``inf`` is returned.
    The value minus one is the chi-square divergence, so it is >= 1.
    """
    p_mean, p_var, q_mean, q_var = (np.atleast_1d(np.asarray(a, dtype=np.float64))
                                    for a in (p_mean, p_var, q_mean, q_var))
    if np.any(p_var <= 0) or np.any(q_var <= 0):
        raise ValueError("variances must be positive")
    denom = 2.0 * q_var - p_var
    if np.any(denom <= 0):
        return math.inf
    log_terms = (np.log(q_var) - 0.5 * np.log(p_var) - 0.5 * np.log(denom)
                 + (p_mean - q_mean) ** 2 / denom)
    return float(np.exp(np.sum(log_terms)))
