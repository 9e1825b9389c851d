"""Function-norm penalties and the regularized training objective.

All penalties act on the logits and are squared norms: the mean of
``||f(z)||^2`` over a sample is an unbiased estimate of ``||f||_{2,Q}^2``.
Samples enter the tape as constants, so gradients flow to the parameters
only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import DimensionError, Node
from .network import TapedMlp
from .samplers import Sampler

KINDS = ("none", "weighted_l2", "sobolev", "train_output", "weight_decay")
SAMPLED_KINDS = ("weighted_l2", "sobolev")


@dataclass(frozen=True)
class RegConfig:
    kind: str = "none"
    lam: float = 0.01
    # regularization batch size as a multiple of the training batch size
    batch_ratio: float = 1.0
    sobolev_step: float = 1e-3
    # "resample": new random unit direction every step; "fixed": one per run
    direction: str = "resample"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {KINDS}")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if not self.batch_ratio > 0:
            raise ValueError("batch_ratio must be positive")
        if not self.sobolev_step > 0:
            raise ValueError("sobolev_step must be positive")
        if self.direction not in ("resample", "fixed"):
            raise ValueError(f"unknown direction policy {self.direction!r}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.lam > 0

    def reg_batch_size(self, train_batch: int) -> int:
        return max(1, int(round(self.batch_ratio * train_batch)))


def _check_batch(z) -> None:
    shape = z.shape if isinstance(z, Node) else np.shape(z)
    if len(shape) != 2 or shape[0] == 0:
        raise DimensionError(f"need a non-empty (m, d) batch, got shape {shape}")


def l2_norm_sq_estimate(model: TapedMlp, z, mode: str = "train", rng=None) -> Node:
    """Mean of ``||f(z_i)||^2`` over the batch ``z``."""
    _check_batch(z)
    tape = model.tape
    return tape.mean(tape.row_sq_l2(model(z, mode=mode, rng=rng)))


def unit_direction(dim: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.standard_normal(dim)
    return u / np.linalg.norm(u)


def sobolev_norm_sq_estimate(model: TapedMlp, z, u, h: float = 1e-3, mode: str = "train",
                             rng=None) -> Node:
    """L2 term plus the mean squared central difference of f along ``u``.

    The directional derivative ``(f(z + h u) - f(z - h u)) / (2h)`` stands in
    for the full input gradient.  It is exact for affine networks and needs
    only two extra forward passes.  All three passes share one dropout
    mask, otherwise the difference would be dominated by mask noise / h.
    """
    _check_batch(z)
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if u.shape != (z.shape[1],):
        raise DimensionError(f"direction of shape {u.shape} for inputs of dimension {z.shape[1]}")
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise ValueError("direction must have unit norm")
    tape = model.tape
    seed = None if rng is None else int(rng.integers(2**63))

    def same_mask():
        return None if seed is None else np.random.default_rng(seed)

    l2 = l2_norm_sq_estimate(model, z, mode=mode, rng=same_mask())
    plus = model(z + h * u, mode=mode, rng=same_mask())
    minus = model(z - h * u, mode=mode, rng=same_mask())
    slope = tape.scale(tape.sub(plus, minus), 1.0 / (2.0 * h))
    return tape.add(l2, tape.mean(tape.row_sq_l2(slope)))


def train_output_penalty(model: TapedMlp, x, mode: str = "train", rng=None) -> Node:
    """Mean squared output norm on the training inputs themselves."""
    return l2_norm_sq_estimate(model, x, mode=mode, rng=rng)


def weight_decay_penalty(model: TapedMlp) -> Node:
    tape = model.tape
    total = tape.sum_sq(model.weights[0])
    for w in model.weights[1:]:
        total = tape.add(total, tape.sum_sq(w))
    return total


class LossTerms(NamedTuple):
    total: Node
    risk: Node
    penalty: Node | None  # unweighted penalty value; None when inactive
    logits: Node


def regularized_loss(model: TapedMlp, x, y, reg: RegConfig, sampler: Sampler | None = None,
                     rng: np.random.Generator | None = None, *, dropout_rng=None,
                     direction: np.ndarray | None = None, weight_decay: float = 0.0) -> LossTerms:
    """Cross-entropy on ``(x, y)`` plus ``reg.lam`` times the chosen penalty.

    ``rng`` drives the regularization sample (and the Sobolev direction when
    ``direction`` is not given); ``dropout_rng`` drives dropout masks.  An
    extra ``weight_decay`` coefficient adds a weight-decay term on top of
    ``reg``, which is how function-norm and weight-decay regularization are
    combined.
    """
    tape = model.tape
    logits = model(x, mode="train", rng=dropout_rng)
    risk = tape.softmax_cross_entropy(logits, y)
    total, penalty = risk, None
    if reg.active:
        if reg.kind in SAMPLED_KINDS and (sampler is None or rng is None):
            raise ValueError(f"regularizer {reg.kind!r} needs a sampler and an rng")
        m = reg.reg_batch_size(len(y))
        if reg.kind == "weighted_l2":
            z = sampler.draw(m, rng)
            penalty = l2_norm_sq_estimate(model, z, rng=dropout_rng)
        elif reg.kind == "sobolev":
            z = sampler.draw(m, rng)
            u = direction if direction is not None else unit_direction(z.shape[1], rng)
            penalty = sobolev_norm_sq_estimate(model, z, u, reg.sobolev_step, rng=dropout_rng)
        elif reg.kind == "train_output":
            penalty = tape.mean(tape.row_sq_l2(logits))
        else:
            penalty = weight_decay_penalty(model)
        total = tape.add(total, tape.scale(penalty, reg.lam))
    if weight_decay > 0:
        total = tape.add(total, tape.scale(weight_decay_penalty(model), weight_decay))
    return LossTerms(total, risk, penalty, logits)


def display_norm(penalty_value: float) -> float:
    """Root of a squared-norm estimate, for reporting."""
    return math.sqrt(max(penalty_value, 0.0))
