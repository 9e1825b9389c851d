"""Generalization-gap bound for norm-constrained networks and helpers
for estimating its inputs.

The gap term is

    (K [ (A + B)^(1/2) D^(1/4) / sqrt(delta) + A^(1/2) D^(1/2) ] + C) * sqrt(2 ln(2/delta) / N)

where ``A`` bounds ``||f||_{2,Q}^2``, ``B`` bounds the standard deviation
of ``||f(z)||^2`` under Q, ``D = int P^2 / Q`` measures the mismatch between
the data marginal P and the sampling distribution Q, ``K`` is the Lipschitz
constant of the loss in its first argument and ``C`` bounds the loss at a
zero output.  It holds with probability at least ``(1 - delta)^2``.

Default constants for softmax cross-entropy: ``C = ln(#classes)`` (the loss
of all-zero logits) and ``K = sqrt(2)``, since the logit gradient
``softmax(z) - e_y`` has squared norm ``(1 - p_y)^2 + sum_{k != y} p_k^2
<= 2 (1 - p_y)^2 <= 2``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .network import MlpSpec, Parameters, forward
from .samplers import Sampler

DEFAULT_LIPSCHITZ = math.sqrt(2.0)
MAX_SUPPORT = 20


def default_loss_at_zero(n_classes: int) -> float:
    return math.log(n_classes)


@dataclass(frozen=True)
class BoundInputs:
    A: float
    B: float
    D: float
    delta: float
    N: int
    lipschitz_K: float = DEFAULT_LIPSCHITZ
    loss_at_zero_C: float = math.log(10)

    def __post_init__(self):
        problems = []
        if not self.A >= 0:
            problems.append("A >= 0")
        if not self.B >= 0:
            problems.append("B >= 0")
        if not self.D >= 1:
            problems.append("D >= 1")
        if not 0 < self.delta < 1:
            problems.append("0 < delta < 1")
        if not self.lipschitz_K > 0:
            problems.append("K > 0")
        if not self.loss_at_zero_C >= 0:
            problems.append("C >= 0")
        if int(self.N) != self.N or self.N < 1:
            problems.append("N a positive integer")
        if problems:
            raise ValueError("invalid bound inputs, need: " + ", ".join(problems))


def generalization_gap_bound(inputs: BoundInputs) -> float:
    """Right-hand-side gap term (to be added to the empirical risk)."""
    A, B, D, delta = inputs.A, inputs.B, inputs.D, inputs.delta
    output_bound = (math.sqrt(A + B) * D ** 0.25 / math.sqrt(delta) + math.sqrt(A) * math.sqrt(D))
    lipschitz_term = inputs.lipschitz_K * output_bound + inputs.loss_at_zero_C
    return lipschitz_term * math.sqrt(2.0 * math.log(2.0 / delta) / inputs.N)


def estimate_A_B(params: Parameters, spec: MlpSpec, sampler: Sampler, m: int,
                 rng: np.random.Generator) -> tuple[float, float]:
    """Sample mean and sample standard deviation of ``||f(z)||^2`` over ``m`` draws."""
    if m < 2:
        raise ValueError("need m >= 2 to estimate a standard deviation")
    sq = squared_output_norms(params, spec, sampler.draw(m, rng))
    return float(sq.mean()), float(sq.std(ddof=1))


def squared_output_norms(params: Parameters, spec: MlpSpec, z) -> np.ndarray:
    logits = forward(params, spec, z, mode="eval")
    return np.einsum("ij,ij->i", logits, logits)


@dataclass
class ImplicationReport:
    premise_holds: bool
    worst_subset_mean: float
    max_value: float
    variance: float
    mA: float
    max_ok: bool | None  # None when the premise fails (nothing asserted)
    variance_ok: bool | None

    @property
    def violated(self) -> bool:
        """True only if the premise holds but a conclusion fails."""
        return self.premise_holds and not (self.max_ok and self.variance_ok)


def verify_sample_mean_implication(values, m: int, A: float) -> ImplicationReport:
    """Check the sample-mean implication by exhaustive enumeration.

    ``values`` are the squared output norms over a finite support on which Q
    is uniform.  If every m-subset has mean at most ``A``, then the largest
    value should be at most ``m A`` and the variance at most ``(m A)^2``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("values must be a non-empty 1-D sequence")
    if np.any(v < 0):
        raise ValueError("squared norms cannot be negative")
    if v.size > MAX_SUPPORT:
        raise ValueError(f"support of size {v.size} too large to enumerate (max {MAX_SUPPORT})")
    if not 1 <= m <= v.size:
        raise ValueError(f"subset size m={m} must lie in [1, {v.size}]")
    subsets = np.array(list(itertools.combinations(range(v.size), m)))
    worst = float(v[subsets].mean(axis=1).max())
    premise = worst <= A
    vmax, var = float(v.max()), float(v.var())
    mA = m * A
    if not premise:
        return ImplicationReport(False, worst, vmax, var, mA, None, None)
    return ImplicationReport(True, worst, vmax, var, mA, vmax <= mA, var <= mA * mA)
