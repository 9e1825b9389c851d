"""Autodiff gradients of the regularized loss against central differences.

The finite-difference side runs on an extended-precision tape so its
rounding error stays far below the tolerance.  Coordinates whose
perturbation flips any ReLU (the loss has a kink inside the stencil) are
excluded and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .network import MlpSpec, Parameters, TapedMlp, init
from .regularizers import KINDS, RegConfig, regularized_loss, unit_direction
from .samplers import Sampler

FD_STEP = 1e-5
MAG_FLOOR = 1e-8
REL_TOL = 1e-4


class FixedSampler(Sampler):
    """Returns the same batch every call, so the loss is a deterministic function."""

    def __init__(self, z):
        self.z = np.asarray(z)
        self.dim = self.z.shape[1]

    def draw(self, m, rng):
        return self.z[:m]


@dataclass
class Case:
    spec: MlpSpec
    params: Parameters
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    dropout_seed: int


@dataclass
class GradcheckReport:
    net: int
    kind: str
    n_params: int
    n_checked: int
    n_excluded: int  # kink inside the stencil
    n_tiny: int  # both magnitudes below the floor
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= REL_TOL


def random_case(rng: np.random.Generator, max_hidden: int = 3, max_width: int = 32) -> Case:
    n_hidden = int(rng.integers(1, max_hidden + 1))
    d, s = int(rng.integers(2, 7)), int(rng.integers(2, 6))
    dims = (d, *(int(w) for w in rng.integers(2, max_width + 1, n_hidden)), s)
    dropout = tuple(float(p) for p in rng.choice([0.0, 0.3], n_hidden))
    batchnorm = tuple(bool(b) for b in rng.random(n_hidden) < 0.3)
    spec = MlpSpec(dims, dropout, batchnorm)
    params = init(spec, int(rng.integers(2**31)))
    arrays = [a + 0.1 * rng.standard_normal(a.shape) if a.ndim == 1 else a for a in params.trainable()]
    params = params.with_trainable(arrays)
    n = int(rng.integers(4, 9))
    return Case(spec, params, rng.standard_normal((n, d)), rng.integers(0, s, n),
                rng.standard_normal((n, d)), unit_direction(d, rng), int(rng.integers(2**31)))


def _loss_fn(case: Case, kind: str, dtype):
    reg = RegConfig(kind, lam=0.5)
    sampler = FixedSampler(case.z)
    shapes = [a.shape for a in case.params.trainable()]
    sizes = [int(np.prod(s)) for s in shapes]

    def fn(theta):
        arrays, k = [], 0
        for shape, size in zip(shapes, sizes):
            arrays.append(theta[k:k + size].reshape(shape))
            k += size
        tape = Tape(dtype)
        model = TapedMlp(tape, case.params.with_trainable(arrays), case.spec)
        terms = regularized_loss(model, case.x, case.y, reg, sampler, np.random.default_rng(0),
                                 dropout_rng=np.random.default_rng(case.dropout_seed),
                                 direction=case.u)
        return tape, model, terms.total

    return fn


def check_case(case: Case, kind: str, net: int = 0, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradcheckReport:
    theta = np.concatenate([a.reshape(-1) for a in case.params.trainable()])
    tape, model, out = _loss_fn(case, kind, np.float64)(theta)
    auto = np.concatenate([g.reshape(-1) for g in tape.grad(out, model.leaves)])

    fn_ext = _loss_fn(case, kind, np.longdouble)
    theta_ext = theta.astype(np.longdouble)
    base_tape, _, _ = fn_ext(theta_ext)
    base_pattern = base_tape.relu_pattern()
    coords = np.arange(theta.size)
    if max_coords is not None and theta.size > max_coords:
        coords = np.sort((rng or np.random.default_rng(net)).choice(theta.size, max_coords, replace=False))
    checked = excluded = tiny = 0
    worst = 0.0
    for i in coords:
        vals, kink = [], False
        for sign in (1, -1):
            t = theta_ext.copy()
            t[i] += sign * FD_STEP
            tp, _, o = fn_ext(t)
            kink |= not np.array_equal(tp.relu_pattern(), base_pattern)
            vals.append(o.value)
        if kink:
            excluded += 1
            continue
        fd = float((vals[0] - vals[1]) / (2 * FD_STEP))
        a = float(auto[i])
        scale = max(abs(a), abs(fd))
        if scale <= MAG_FLOOR:
            tiny += 1
            continue
        checked += 1
        worst = max(worst, abs(a - fd) / scale)
    return GradcheckReport(net, kind, int(theta.size), checked, excluded, tiny, worst)


def run_gradcheck(n_nets: int = 50, seed: int = 0, kinds=KINDS, max_coords: int | None = 150):
    """Reports for ``n_nets`` random MLPs and every penalty kind."""
    rng = np.random.default_rng(seed)
    reports = []
    for net in range(n_nets):
        case = random_case(rng)
        for kind in kinds:
            reports.append(check_case(case, kind, net, max_coords, np.random.default_rng([seed, net])))
    return reports
