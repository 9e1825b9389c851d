"""ReLU multilayer perceptrons, their baseline regularizers, and
function-preserving reparameterizations.

Weights are stored input-major: layer ``i`` maps ``h @ W[i] + b[i]`` with
``W[i]`` of shape ``(fan_in, fan_out)``.  Hidden layers apply, in order,
the affine map, optional batch normalization, ReLU and optional inverted
dropout.  The output layer is affine only, so the network returns logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Node, Tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of an MLP: ``layer_dims = (d, h1, ..., s)``.

    ``dropout`` and ``batchnorm`` may be given as a single value applied to
    every hidden layer or as one entry per hidden layer.
    """

    layer_dims: tuple[int, ...]
    dropout: tuple[float, ...] | float = 0.0
    batchnorm: tuple[bool, ...] | bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if min(dims) < 1:
            raise ValueError(f"layer dimensions must be positive: {dims}")
        n_hidden = len(dims) - 2
        dropout = self.dropout
        if np.isscalar(dropout):
            dropout = (float(dropout),) * n_hidden
        batchnorm = self.batchnorm
        if isinstance(batchnorm, (bool, np.bool_)):
            batchnorm = (bool(batchnorm),) * n_hidden
        dropout = tuple(float(p) for p in dropout)
        batchnorm = tuple(bool(b) for b in batchnorm)
        if len(dropout) != n_hidden or len(batchnorm) != n_hidden:
            raise ValueError("dropout/batchnorm need one entry per hidden layer")
        if any(not 0.0 <= p < 1.0 for p in dropout):
            raise ValueError(f"dropout rates must lie in [0, 1): {dropout}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "dropout", dropout)
        object.__setattr__(self, "batchnorm", batchnorm)

    @property
    def n_layers(self) -> int:
        """Number of affine layers (hidden layers + output layer)."""
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class Parameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # one entry per hidden layer, None where batch norm is disabled
    bn_scale: list[np.ndarray | None] = field(default_factory=list)
    bn_shift: list[np.ndarray | None] = field(default_factory=list)
    running_mean: list[np.ndarray | None] = field(default_factory=list)
    running_var: list[np.ndarray | None] = field(default_factory=list)

    def trainable(self) -> list[np.ndarray]:
        """Arrays updated by gradient descent, in a fixed order."""
        out = list(self.weights) + list(self.biases)
        out += [a for a in self.bn_scale if a is not None]
        out += [a for a in self.bn_shift if a is not None]
        return out

    def with_trainable(self, arrays: list[np.ndarray]) -> "Parameters":
        arrays = list(arrays)
        n = len(self.weights)
        weights, biases, rest = arrays[:n], arrays[n:2 * n], arrays[2 * n:]
        k = sum(a is not None for a in self.bn_scale)
        scales, shifts = iter(rest[:k]), iter(rest[k:])
        return Parameters(
            weights=weights,
            biases=biases,
            bn_scale=[None if a is None else next(scales) for a in self.bn_scale],
            bn_shift=[None if a is None else next(shifts) for a in self.bn_shift],
            running_mean=[None if a is None else a.copy() for a in self.running_mean],
            running_var=[None if a is None else a.copy() for a in self.running_var],
        )

    def copy(self) -> "Parameters":
        return self.with_trainable([a.copy() for a in self.trainable()])

    def equals(self, other: "Parameters") -> bool:
        """Exact (bitwise) equality of every stored array."""
        mine, theirs = _all_arrays(self), _all_arrays(other)
        return len(mine) == len(theirs) and all(
            (a is None and b is None) or (a is not None and b is not None
                                          and a.shape == b.shape and np.array_equal(a, b))
            for a, b in zip(mine, theirs))


def _all_arrays(p: Parameters) -> list:
    return (list(p.weights) + list(p.biases) + list(p.bn_scale) + list(p.bn_shift)
            + list(p.running_mean) + list(p.running_var))


def init(spec: MlpSpec, seed: int) -> Parameters:
    """He-initialized weights (variance 2/fan_in) and zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights = [rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i], dims[i + 1]))
               for i in range(spec.n_layers)]
    biases = [np.zeros(dims[i + 1]) for i in range(spec.n_layers)]
    hidden = dims[1:-1]
    return Parameters(
        weights=weights,
        biases=biases,
        bn_scale=[np.ones(h) if bn else None for h, bn in zip(hidden, spec.batchnorm)],
        bn_shift=[np.zeros(h) if bn else None for h, bn in zip(hidden, spec.batchnorm)],
        running_mean=[np.zeros(h) if bn else None for h, bn in zip(hidden, spec.batchnorm)],
        running_var=[np.ones(h) if bn else None for h, bn in zip(hidden, spec.batchnorm)],
    )


def zeros_like(params: Parameters) -> Parameters:
    p = params.with_trainable([np.zeros_like(a) for a in params.trainable()])
    return p


class TapedMlp:
    """An MLP whose parameters are recorded as leaves on ``tape``.

    Calling the object records a forward pass and returns the logits node.
    Batch statistics of the most recent train-mode call are kept in
    :attr:`last_batch_stats` so the caller can update running statistics.
    """

    def __init__(self, tape: Tape, params: Parameters, spec: MlpSpec):
        self.tape = tape
        self.params = params
        self.spec = spec
        self.weights = [tape.leaf(w) for w in params.weights]
        self.biases = [tape.leaf(b) for b in params.biases]
        self.bn_scale = [None if a is None else tape.leaf(a) for a in params.bn_scale]
        self.bn_shift = [None if a is None else tape.leaf(a) for a in params.bn_shift]
        self.last_batch_stats: list[tuple[np.ndarray, np.ndarray] | None] = []

    @property
    def leaves(self) -> list[Node]:
        """Leaf nodes in :meth:`Parameters.trainable` order."""
        return (self.weights + self.biases + [a for a in self.bn_scale if a is not None]
                + [a for a in self.bn_shift if a is not None])

    def __call__(self, x, mode: str = "train", rng: np.random.Generator | None = None) -> Node:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        tape, spec, params = self.tape, self.spec, self.params
        h = x if isinstance(x, Node) else tape.constant(x)
        if h.value.ndim != 2 or h.shape[1] != spec.input_dim:
            raise DimensionError(f"input of shape {h.shape} for input dimension {spec.input_dim}")
        stats = []
        for i in range(spec.n_layers):
            h = tape.add_bias(tape.matmul(h, self.weights[i]), self.biases[i])
            if i == spec.n_layers - 1:
                break
            if spec.batchnorm[i]:
                if mode == "train":
                    h, mu, var = tape.batch_norm(h, self.bn_scale[i], self.bn_shift[i], BN_EPS)
                    stats.append((mu, var))
                else:
                    inv = 1.0 / np.sqrt(params.running_var[i] + BN_EPS)
                    h = tape.scale(tape.add_bias(h, tape.constant(-params.running_mean[i])), inv)
                    h = tape.add_bias(tape.col_scale(h, self.bn_scale[i]), self.bn_shift[i])
            else:
                stats.append(None)
            h = tape.relu(h)
            p = spec.dropout[i]
            if mode == "train" and p > 0.0:
                if rng is None:
                    raise ValueError("train-mode dropout needs an rng")
                keep = rng.random(h.shape) >= p
                h = tape.scale(h, keep / (1.0 - p))
        if mode == "train":
            self.last_batch_stats = stats
        return h


def forward(params: Parameters, spec: MlpSpec, x, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits of the network on a batch ``x`` of shape ``(n, d)``."""
    tape = Tape()
    return TapedMlp(tape, params, spec)(x, mode=mode, rng=rng).value


def update_running_stats(params: Parameters, batch_stats, momentum: float = BN_MOMENTUM) -> None:
    """Fold batch statistics into the running estimates, in place."""
    for i, s in enumerate(batch_stats):
        if s is None or params.running_mean[i] is None:
            continue
        mu, var = s
        params.running_mean[i] = momentum * params.running_mean[i] + (1 - momentum) * mu
        params.running_var[i] = momentum * params.running_var[i] + (1 - momentum) * var


def weight_decay_norm(params: Parameters) -> float:
    """Sum of squared Frobenius norms of the weight matrices (biases excluded)."""
    return float(sum(np.sum(w * w) for w in params.weights))


def rescale_layer_pair(params: Parameters, spec: MlpSpec, i: int, c: float) -> Parameters:
    """Scale layer ``i`` (weights and bias) by ``c`` and layer ``i+1``'s weights by ``1/c``.

    For ``c > 0`` the realized function is unchanged because ReLU is
    positively homogeneous.
    """
    if not c > 0:
        raise ValueError(f"rescaling factor must be positive, got {c}")
    if not 0 <= i < spec.n_layers - 1:
        raise ValueError(f"layer pair ({i}, {i + 1}) does not exist")
    if spec.batchnorm[i]:
        raise ValueError(f"batch normalization follows layer {i}; rescaling is not function-preserving")
    out = params.copy()
    out.weights[i] = params.weights[i] * c
    out.biases[i] = params.biases[i] * c
    out.weights[i + 1] = params.weights[i + 1] / c
    return out


def permute_hidden_units(params: Parameters, spec: MlpSpec, i: int, permutation) -> Parameters:
    """Reorder the output units of hidden layer ``i`` consistently across layers."""
    if not 0 <= i < spec.n_layers - 1:
        raise ValueError(f"layer {i} is not a hidden layer")
    perm = np.asarray(permutation)
    width = spec.layer_dims[i + 1]
    if perm.shape != (width,) or not np.array_equal(np.sort(perm), np.arange(width)):
        raise ValueError(f"not a permutation of {width} units")
    out = params.copy()
    out.weights[i] = params.weights[i][:, perm]
    out.biases[i] = params.biases[i][perm]
    out.weights[i + 1] = params.weights[i + 1][perm, :]
    if params.bn_scale[i] is not None:
        out.bn_scale[i] = params.bn_scale[i][perm]
        out.bn_shift[i] = params.bn_shift[i][perm]
        out.running_mean[i] = params.running_mean[i][perm]
        out.running_var[i] = params.running_var[i][perm]
    return out


def save_checkpoint(params: Parameters, spec: MlpSpec, path) -> None:
    """Write a JSON checkpoint; floats use ``repr`` so reading back is exact."""
    def enc(a):
        return None if a is None else {"shape": list(a.shape), "data": [repr(float(v)) for v in a.reshape(-1)]}

    doc = {
        "format": "funcnorm-mlp",
        "version": CHECKPOINT_VERSION,
        "spec": {"layer_dims": list(spec.layer_dims), "dropout": list(spec.dropout),
                 "batchnorm": list(spec.batchnorm)},
        "weights": [enc(a) for a in params.weights],
        "biases": [enc(a) for a in params.biases],
        "bn_scale": [enc(a) for a in params.bn_scale],
        "bn_shift": [enc(a) for a in params.bn_shift],
        "running_mean": [enc(a) for a in params.running_mean],
        "running_var": [enc(a) for a in params.running_var],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[Parameters, MlpSpec]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "funcnorm-mlp" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint {path}")

    def dec(e):
        if e is None:
            return None
        return np.array([float(v) for v in e["data"]], dtype=np.float64).reshape(e["shape"])

    s = doc["spec"]
    spec = MlpSpec(tuple(s["layer_dims"]), tuple(s["dropout"]), tuple(s["batchnorm"]))
    params = Parameters(**{k: [dec(e) for e in doc[k]] for k in
                           ("weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var")})
    return params, spec
