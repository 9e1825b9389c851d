"""Compile a 3-CNF formula into a ReLU network whose L2 norm is non-zero
exactly when the formula is satisfiable.

Gadgets (``eps`` < 1/2):

* ``f0(x) = (relu(x + eps) - 2 relu(x) + relu(x - eps)) / eps`` is a hat of
  height 1 at 0 and half-width ``eps``; ``f1(x) = f0(x - 1)``.
* A literal on variable ``i`` is ``f1(x_i)`` (positive) or ``f0(x_i)``
  (negated).
* A clause is ``OR(S) = sum_{t=1..3} f0(S - t)`` where ``S`` is the sum of
  its three literal values.
* The formula is ``AND = f0(sum_j OR_j - c)`` for ``c`` clauses.
* Optional truncation ``max(f_B - ||x||_1 / (1 + p), 0)`` makes the function
  vanish far from the unit cube.

The network has three hidden layers (four when truncated).  The first one
holds three ReLUs per distinct (variable, polarity) pair, so at most ``6p``
units (plus ``2p`` units computing ``|x_i|`` for truncation).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 0.25
MAX_BRUTE_FORCE_VARS = 24


@dataclass(frozen=True)
class Cnf3:
    """``clauses`` holds triples of ``(variable, negated)`` with 1-based variables."""

    num_vars: int
    clauses: tuple[tuple[tuple[int, bool], ...], ...]

    def __post_init__(self):
        if self.num_vars < 1:
            raise ValueError("need at least one variable")
        clauses = tuple(tuple((int(v), bool(neg)) for v, neg in cl) for cl in self.clauses)
        for cl in clauses:
            if len(cl) != 3:
                raise ValueError(f"clause {cl} does not have exactly three literals")
            for v, _ in cl:
                if not 1 <= v <= self.num_vars:
                    raise ValueError(f"variable {v} out of range 1..{self.num_vars}")
        object.__setattr__(self, "clauses", clauses)

    @property
    def num_clauses(self) -> int:
        return len(self.clauses)


def parse_dimacs(text: str) -> Cnf3:
    """Parse DIMACS CNF; clauses with fewer than three literals are padded
    by repeating their last literal."""
    num_vars = num_clauses = None
    tokens: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("c") or line.startswith("%"):
            continue
        if line.startswith("p"):
            m = re.fullmatch(r"p\s+cnf\s+(\d+)\s+(\d+)", line)
            if m is None or num_vars is not None:
                raise ValueError(f"line {lineno}: malformed problem line {line!r}")
            num_vars, num_clauses = int(m.group(1)), int(m.group(2))
            continue
        if num_vars is None:
            raise ValueError(f"line {lineno}: clause before the 'p cnf' header")
        try:
            tokens.extend(int(t) for t in line.split())
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer token in {line!r}") from None
    if num_vars is None:
        raise ValueError("missing 'p cnf' header")
    clauses, current = [], []
    for t in tokens:
        if t == 0:
            if not current:
                raise ValueError("empty clause")
            if len(current) > 3:
                raise ValueError(f"clause with {len(current)} literals is not supported (max 3)")
            current += [current[-1]] * (3 - len(current))
            clauses.append(tuple((abs(v), v < 0) for v in current))
            current = []
        else:
            if abs(t) > num_vars:
                raise ValueError(f"literal {t} exceeds the declared {num_vars} variables")
            current.append(t)
    if current:
        raise ValueError("last clause is not terminated by 0")
    if len(clauses) != num_clauses:
        raise ValueError(f"header declares {num_clauses} clauses, found {len(clauses)}")
    return Cnf3(num_vars, tuple(clauses))


def to_dimacs(cnf: Cnf3) -> str:
    lines = [f"p cnf {cnf.num_vars} {cnf.num_clauses}"]
    for cl in cnf.clauses:
        lines.append(" ".join(str(-v if neg else v) for v, neg in cl) + " 0")
    return "\n".join(lines) + "\n"


def random_cnf3(num_vars: int, num_clauses: int, rng: np.random.Generator) -> Cnf3:
    """Uniform random 3-CNF: every literal picks a variable and a sign independently."""
    vars_ = rng.integers(1, num_vars + 1, size=(num_clauses, 3))
    signs = rng.random((num_clauses, 3)) < 0.5
    return Cnf3(num_vars, tuple(tuple((int(v), bool(s)) for v, s in zip(vr, sr))
                                for vr, sr in zip(vars_, signs)))


# -- direct formula ------------------------------------------------------

def f0(x, eps: float = DEFAULT_EPS):
    x = np.asarray(x, dtype=np.float64)
    r = lambda t: np.maximum(t, 0.0)  # noqa: E731
    return (r(x + eps) - 2.0 * r(x) + r(x - eps)) / eps


def f1(x, eps: float = DEFAULT_EPS):
    return f0(np.asarray(x, dtype=np.float64) - 1.0, eps)


def or_block(S, eps: float = DEFAULT_EPS):
    """Clause gadget applied to the sum ``S`` of its literal values."""
    return sum(f0(np.asarray(S) - t, eps) for t in (1, 2, 3))


def formula_value(cnf: Cnf3, x, eps: float = DEFAULT_EPS, truncated: bool = False) -> np.ndarray:
    """Evaluate the gadget composition directly (no network); ``x`` is (n, p) or (p,)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    total = np.zeros(x.shape[0])
    for cl in cnf.clauses:
        s = sum(f0(x[:, v - 1], eps) if neg else f1(x[:, v - 1], eps) for v, neg in cl)
        total = total + or_block(s, eps)
    out = f0(total - cnf.num_clauses, eps)
    if truncated:
        out = np.maximum(out - np.abs(x).sum(axis=1) / (1 + cnf.num_vars), 0.0)
    return out[0] if single else out


# -- network construction -------------------------------------------------

@dataclass(frozen=True)
class ConstructedNet:
    """Layers map ``h @ weights[k] + biases[k]``; ReLU on all but the last."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    num_vars: int
    num_clauses: int
    eps: float
    truncated: bool

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def hidden_depth(self) -> int:
        return len(self.weights) - 1

    def literal_layer_width(self) -> int:
        """First-layer units devoted to literals (excludes truncation units)."""
        return self.hidden_widths[0] - (2 * self.num_vars if self.truncated else 0)


_HAT = (1.0, -2.0, 1.0)


def compile(cnf: Cnf3, eps: float = DEFAULT_EPS, truncated: bool = False) -> ConstructedNet:  # noqa: A001
    """Build the network for ``cnf`` in time linear in its size."""
    if not 0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    p, c = cnf.num_vars, cnf.num_clauses
    offsets = (eps, 0.0, -eps)

    # layer 1: hat units for each (variable, negated) pair that occurs
    pairs = sorted({lit for cl in cnf.clauses for lit in cl})
    pair_index = {lit: k for k, lit in enumerate(pairs)}
    n1 = 3 * len(pairs) + (2 * p if truncated else 0)
    W1, b1 = np.zeros((p, n1)), np.zeros(n1)
    for k, (v, neg) in enumerate(pairs):
        centre = 0.0 if neg else 1.0
        for j, off in enumerate(offsets):
            W1[v - 1, 3 * k + j] = 1.0
            b1[3 * k + j] = off - centre
    if truncated:
        base = 3 * len(pairs)
        for i in range(p):
            W1[i, base + 2 * i] = 1.0
            W1[i, base + 2 * i + 1] = -1.0

    # literal values are linear in layer-1 outputs; clause sums S_j likewise
    S = np.zeros((n1, c))
    for j, cl in enumerate(cnf.clauses):
        for lit in cl:
            k = pair_index[lit]
            for t, w in enumerate(_HAT):
                S[3 * k + t, j] += w / eps

    # layer 2: for each clause and t in 1..3, hat units around S_j = t
    n2 = 9 * c + (1 if truncated else 0)
    W2, b2 = np.zeros((n1, n2)), np.zeros(n2)
    for j in range(c):
        for t in range(3):
            for o, off in enumerate(offsets):
                col = 9 * j + 3 * t + o
                W2[:, col] = S[:, j]
                b2[col] = off - (t + 1)
    if truncated:
        base = 3 * len(pairs)
        W2[base:base + 2 * p, -1] = 1.0 / (1 + p)

    # layer 3: hat units around sum_j OR_j = c
    or_sum = np.zeros(n2)
    for j in range(c):
        for t in range(3):
            for o, w in enumerate(_HAT):
                or_sum[9 * j + 3 * t + o] = w / eps
    n3 = 3 + (1 if truncated else 0)
    W3, b3 = np.zeros((n2, n3)), np.zeros(n3)
    for o, off in enumerate(offsets):
        W3[:, o] = or_sum
        b3[o] = off - c
    and_out = np.array([w / eps for w in _HAT])

    if not truncated:
        W4 = np.zeros((n3, 1))
        W4[:, 0] = and_out
        return ConstructedNet((W1, W2, W3, W4), (b1, b2, b3, np.zeros(1)), p, c, eps, False)

    W3[-1, -1] = 1.0  # carry f_T through
    W4 = np.zeros((n3, 1))
    W4[:3, 0] = and_out
    W4[3, 0] = -1.0
    W5 = np.ones((1, 1))
    return ConstructedNet((W1, W2, W3, W4, W5), (b1, b2, b3, np.zeros(1), np.zeros(1)),
                          p, c, eps, True)


def evaluate(net: ConstructedNet, x) -> np.ndarray:
    """Network output at ``x`` of shape (n, p), or a float for a single point."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != net.num_vars:
        raise ValueError(f"input dimension {h.shape[1]} != {net.num_vars} variables")
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
    out = h[:, 0]
    return float(out[0]) if single else out


def boolean_corners(p: int) -> np.ndarray:
    """All 2^p points of {0, 1}^p, shape (2^p, p)."""
    codes = np.arange(2 ** p, dtype=np.int64)
    return ((codes[:, None] >> np.arange(p)) & 1).astype(np.float64)


def corner_max(net: ConstructedNet) -> float:
    return float(evaluate(net, boolean_corners(net.num_vars)).max())


def brute_force_sat(cnf: Cnf3) -> tuple[bool, tuple[bool, ...] | None]:
    """Exact satisfiability by enumerating all assignments (p <= 24)."""
    p = cnf.num_vars
    if p > MAX_BRUTE_FORCE_VARS:
        raise ValueError(f"{p} variables is too many to enumerate (max {MAX_BRUTE_FORCE_VARS})")
    var_idx = np.array([[v - 1 for v, _ in cl] for cl in cnf.clauses], dtype=np.int64).reshape(-1, 3)
    negated = np.array([[neg for _, neg in cl] for cl in cnf.clauses], dtype=bool).reshape(-1, 3)
    chunk = 1 << min(p, 16)
    for start in range(0, 2 ** p, chunk):
        codes = np.arange(start, min(start + chunk, 2 ** p), dtype=np.int64)
        assign = ((codes[:, None] >> np.arange(p)) & 1).astype(bool)
        lit_true = assign[:, var_idx] != negated
        sat = lit_true.any(axis=2).all(axis=1)
        hits = np.flatnonzero(sat)
        if hits.size:
            return True, tuple(bool(b) for b in assign[hits[0]])
    return False, None


# -- sampled norm ----------------------------------------------------------

def jitter_radius(net: ConstructedNet) -> float:
    """Half-width of the corner jitter that keeps the output above a positive
    floor near every satisfying corner.

    Each clause value drops by at most ``3 r / eps^2`` and the conjunction by
    that sum over ``eps``, so ``r = eps^3 / (6 c (p + 1))`` keeps ``f_B`` above
    ``1 - 1 / (2 (p + 1))``, which also exceeds the truncation term there.
    """
    return net.eps ** 3 / (6 * max(net.num_clauses, 1) * (net.num_vars + 1))


def draw_q(net: ConstructedNet, m: int, rng: np.random.Generator, q: str = "mixture",
           corner_weight: float = 0.5) -> np.ndarray:
    """Samples from the sampling distribution on ``[-eps, 1 + eps]^p``.

    ``q="uniform"`` is the uniform law on the cube.  ``q="mixture"`` draws from
    it with probability ``1 - corner_weight`` and otherwise picks a uniformly
    random Boolean corner plus a small uniform jitter.  Both have a density
    on the cube, so either defines a weighted L2 norm whose zero set is the
    zero function; the mixture concentrates mass where satisfying
    assignments live, which uniform sampling almost never reaches for
    more than a few variables.
    """
    p, eps = net.num_vars, net.eps
    uniform = rng.uniform(-eps, 1.0 + eps, size=(m, p))
    if q == "uniform":
        return uniform
    if q != "mixture":
        raise ValueError(f"unknown sampling law {q!r}")
    r = jitter_radius(net)
    corners = (rng.random((m, p)) < 0.5).astype(np.float64)
    jittered = corners + rng.uniform(-r, r, size=(m, p))
    use_corner = rng.random(m) < corner_weight
    return np.where(use_corner[:, None], jittered, uniform)


def norm_from_samples(net: ConstructedNet, z) -> float:
    """Root mean square of the network output over the samples ``z``."""
    v = evaluate(net, np.atleast_2d(z))
    return math.sqrt(float(np.mean(v * v)))


def mc_norm_estimate(net: ConstructedNet, m: int, rng: np.random.Generator, q: str = "mixture",
                     chunk: int = 20000) -> float:
    """Sampled weighted L2 norm of the constructed network."""
    if m < 1:
        raise ValueError("need at least one sample")
    total = 0.0
    for start in range(0, m, chunk):
        v = evaluate(net, draw_q(net, min(chunk, m - start), rng, q))
        total += float(np.sum(v * v))
    return math.sqrt(total / m)


def single_clause_norm_sq_uniform(eps: float = DEFAULT_EPS) -> float:
    """Exact ``||f_B||^2`` under the uniform law for ``p = 1`` and the clause (x or x or x).

    Near ``x = 1`` the clause sum is ``3 (1 - |x - 1| / eps)``, which crosses
    the integers 3, 2, 1 at distances 0, eps/3 and 2 eps/3; each crossing
    gives a triangular bump of height 1 and half-width ``eps^3 / 3``.  There
    are five bumps (one centred at 1, two on each side), each with squared
    integral ``2/3`` of its half-width.
    """
    half_width = eps ** 3 / 3
    return 5 * (2 * half_width / 3) / (1 + 2 * eps)


# -- OR-block range --------------------------------------------------------

@dataclass
class RangeReport:
    minimum: float
    maximum: float
    argmax: np.ndarray
    n_points: int


def or_block_F(X, eps: float = DEFAULT_EPS) -> np.ndarray:
    """OR block on three positive literals: ``sum_t f0(sum_i f1(X_i) - t)``; X is (n, 3)."""
    X = np.asarray(X, dtype=np.float64)
    return or_block(f1(X, eps).sum(axis=1), eps)


def or_block_range_check(eps: float = DEFAULT_EPS, resolution: int = 101, n_random: int = 0,
                         rng: np.random.Generator | None = None, far: float = 5.0) -> RangeReport:
    """Min and max of the OR block over a grid on ``[1 - 2eps, 1 + 2eps]^3``
    plus random points in that box and in the far field ``[-far, far]^3``."""
    if resolution < 50:
        raise ValueError("use at least 50 grid points per axis")
    axis = np.linspace(1 - 2 * eps, 1 + 2 * eps, resolution)
    if resolution % 2 == 1:
        axis[resolution // 2] = 1.0
    lo, hi, arg, count = math.inf, -math.inf, None, 0

    def scan(points):
        nonlocal lo, hi, arg, count
        vals = or_block_F(points, eps)
        count += len(points)
        lo = min(lo, float(vals.min()))
        k = int(vals.argmax())
        if vals[k] > hi:
            hi, arg = float(vals[k]), points[k].copy()

    for a in axis:
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        scan(np.column_stack([np.full(g1.size, a), g1.ravel(), g2.ravel()]))
    if n_random:
        rng = rng if rng is not None else np.random.default_rng(0)
        half = n_random // 2
        scan(rng.uniform(1 - 2 * eps, 1 + 2 * eps, size=(half, 3)))
        scan(rng.uniform(-far, far, size=(n_random - half, 3)))
    return RangeReport(lo, hi, arg, count)
