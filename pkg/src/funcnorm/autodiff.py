"""Minimal reverse-mode automatic differentiation on dense numpy arrays.

A :class:`Tape` records every operation applied to its nodes; calling
:meth:`Tape.backward` on a scalar node returns the gradient of that scalar
with respect to every leaf recorded with ``requires_grad``.  A tape is meant
to be rebuilt on each training step (dropout masks and regularization
samples change between steps), and supports exactly one backward pass.

Conventions:
    * values are stored as ``float64`` unless the tape is created with another
      floating dtype (the finite-difference oracle uses ``longdouble``);
    * the derivative of ``relu`` at exactly 0 is 0;
    * any non-finite value produced or consumed raises :class:`NumericError`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A NaN or infinity entered or left a recorded operation."""


class ContractError(RuntimeError):
    """The tape was used outside its contract (e.g. backward of a non-scalar)."""


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"node {self.index} has shape {self.shape}, not a scalar")
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: "Node") -> "Node":
        return self.tape.add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return self.tape.sub(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return self.tape.matmul(self, other)

    def __mul__(self, other) -> "Node":
        if isinstance(other, Node):
            return self.tape.mul(self, other)
        return self.tape.scale(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Node(index={self.index}, shape={self.shape})"


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in {what}")


class Tape:
    """Append-only record of operations for one forward/backward cycle."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._ops: list[str] = []
        self._relu_masks: list[np.ndarray] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._values)

    # -- recording -------------------------------------------------------

    def _push(self, op: str, value: np.ndarray, parents: Sequence[Node], vjp,
              requires: bool | None = None) -> Node:
        if self._consumed:
            raise ContractError("tape already differentiated; record a new tape")
        for p in parents:
            if p.tape is not self:
                raise ContractError("operand recorded on a different tape")
        _check_finite(value, op)
        if requires is None:
            requires = any(p.requires_grad for p in parents)
        index = len(self._values)
        self._values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp if requires else None)
        self._ops.append(op)
        return Node(self, index, value, requires)

    def _as_array(self, value, what: str) -> np.ndarray:
        arr = np.array(value, dtype=self.dtype)
        _check_finite(arr, what)
        return arr

    def leaf(self, value) -> Node:
        """Record a differentiable input (a parameter)."""
        return self._push("leaf", self._as_array(value, "leaf"), (), None, requires=True)

    def constant(self, value) -> Node:
        """Record a non-differentiable input (data, masks, samples)."""
        return self._push("constant", self._as_array(value, "constant"), (), None)

    # -- operations ------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul of {a.shape} and {b.shape}")
        av, bv = a.value, b.value

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._push("matmul", av @ bv, (a, b), vjp)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise DimensionError(f"add of {a.shape} and {b.shape}")
        return self._push("add", a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise DimensionError(f"sub of {a.shape} and {b.shape}")
        return self._push("sub", a.value - b.value, (a, b), lambda g: (g, -g))

    def add_bias(self, x: Node, b: Node) -> Node:
        """Add a length-k vector to every row of an n-by-k matrix."""
        if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
            raise DimensionError(f"add_bias of {x.shape} and {b.shape}")
        return self._push("add_bias", x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)))

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product of two recorded nodes of equal shape."""
        if a.shape != b.shape:
            raise DimensionError(f"mul of {a.shape} and {b.shape}")
        av, bv = a.value, b.value
        return self._push("mul", av * bv, (a, b), lambda g: (g * bv, g * av))

    def col_scale(self, x: Node, v: Node) -> Node:
        """Multiply column j of an n-by-k matrix by the recorded scalar v[j]."""
        if x.value.ndim != 2 or v.shape != (x.shape[1],):
            raise DimensionError(f"col_scale of {x.shape} by {v.shape}")
        xv, vv = x.value, v.value
        return self._push("col_scale", xv * vv, (x, v), lambda g: (g * vv, (g * xv).sum(axis=0)))

    def scale(self, x: Node, c) -> Node:
        """Multiply by a constant scalar or a constant array broadcastable to x."""
        c = self._as_array(c, "scale factor")
        if np.broadcast_shapes(x.shape, c.shape) != x.shape:
            raise DimensionError(f"scale of {x.shape} by {c.shape}")
        return self._push("scale", x.value * c, (x,), lambda g: (g * c,))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        self._relu_masks.append(mask)
        return self._push("relu", np.where(mask, x.value, 0.0).astype(self.dtype), (x,),
                          lambda g: (g * mask,))

    def row_sq_l2(self, x: Node) -> Node:
        """Squared Euclidean norm of every row: [n, k] -> [n]."""
        if x.value.ndim != 2:
            raise DimensionError(f"row_sq_l2 expects a matrix, got {x.shape}")
        xv = x.value
        return self._push("row_sq_l2", np.einsum("ij,ij->i", xv, xv), (x,),
                          lambda g: (2.0 * g[:, None] * xv,))

    def sum_sq(self, x: Node) -> Node:
        """Sum of squared entries, returned as a scalar."""
        xv = x.value
        return self._push("sum_sq", np.array(np.sum(xv * xv), dtype=self.dtype), (x,),
                          lambda g: (2.0 * g * xv,))

    def sum(self, x: Node) -> Node:
        shape = x.shape
        return self._push("sum", np.array(x.value.sum(), dtype=self.dtype), (x,),
                          lambda g: (np.full(shape, g, dtype=self.dtype),))

    def mean(self, x: Node) -> Node:
        if x.value.size == 0:
            raise DimensionError("mean of an empty array")
        shape, n = x.shape, x.value.size
        return self._push("mean", np.array(x.value.mean(), dtype=self.dtype), (x,),
                          lambda g: (np.full(shape, g / n, dtype=self.dtype),))

    def softmax_cross_entropy(self, logits: Node, labels) -> Node:
        """Mean cross-entropy of integer labels under softmax(logits)."""
        labels = np.asarray(labels)
        if logits.value.ndim != 2 or labels.shape != (logits.shape[0],):
            raise DimensionError(f"softmax_cross_entropy of {logits.shape} with labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise DimensionError("label out of range")
        z = logits.value
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        n = z.shape[0]
        rows = np.arange(n)
        loss = -log_probs[rows, labels].mean()

        def vjp(g):
            probs = np.exp(log_probs)
            probs[rows, labels] -= 1.0
            return (probs * (g / n),)

        return self._push("softmax_cross_entropy", np.array(loss, dtype=self.dtype), (logits,), vjp)

    def batch_norm(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5):
        """Normalize columns by batch statistics, then scale and shift.

        Returns the output node together with the batch mean and (biased)
        variance, which callers fold into running statistics.
        """
        if x.value.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(f"batch_norm of {x.shape} with {gamma.shape}, {beta.shape}")
        xv = x.value
        mu = xv.mean(axis=0)
        var = xv.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv_std
        gv = gamma.value
        n = xv.shape[0]

        def vjp(g):
            dxhat = g * gv
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

        out = self._push("batch_norm", xhat * gv + beta.value, (x, gamma, beta), vjp)
        return out, mu, var

    # -- differentiation -------------------------------------------------

    def relu_pattern(self) -> np.ndarray:
        """Concatenated activation pattern of every relu recorded so far."""
        if not self._relu_masks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([m.reshape(-1) for m in self._relu_masks])

    def backward(self, out: Node) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``out`` with respect to every leaf.

        Returns a mapping from leaf node index to gradient array.
        """
        if out.tape is not self:
            raise ContractError("output recorded on a different tape")
        if out.value.size != 1 or out.value.ndim > 1:
            raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
        if self._consumed:
            raise ContractError("backward already called on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
        leaves: dict[int, np.ndarray] = {}
        for i in range(out.index, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            if self._ops[i] == "leaf":
                leaves[i] = g
                continue
            vjp = self._vjps[i]
            if vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        for i, op in enumerate(self._ops[: out.index + 1]):
            if op == "leaf" and i not in leaves:
                leaves[i] = np.zeros_like(self._values[i])
        return leaves

    def grad(self, out: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """Backward pass returning gradients for ``wrt`` in order."""
        leaves = self.backward(out)
        return [leaves[n.index] for n in wrt]


def finite_diff_gradient(fn: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of ``fn`` at ``params``.

    ``fn`` receives a perturbed copy of ``params`` (same shape and dtype) and
    must return a scalar.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    p = np.array(params, copy=True)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    grad = np.zeros(p.shape, dtype=p.dtype)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(p)
        flat[i] = orig - h
        down = fn(p)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
