"""Multinomial kernel logistic regression with RKHS-norm or sampled
weighted-L2 regularization.

The decision function for class ``c`` is ``f_c(x) = sum_i alpha_ic K(x, x_i) + b_c``.
Penalties:

* ``rkhs``:         ``sum_c alpha_c^T K alpha_c``
* ``weighted_l2``:  ``(1/m) sum_j ||f(z_j)||^2`` over held-out samples ``z_j``
* ``none``:         no penalty

Biases get no separate penalty term.  The convex objective is minimized
with L-BFGS whose initial inverse Hessian is the inverse of the exact
class-decoupled Hessian at ``alpha = 0`` (see ``kernel_preconditioner``).
In alpha coordinates the Hessian behaves like ``K W K``, so the plain
method stalls on smooth kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import lbfgs

REG_KINDS = ("none", "rkhs", "weighted_l2")
PSD_TOL = 1e-8
PRECOND_EPS = 1e-10


def rbf_gram(X, Xp, gamma: float) -> np.ndarray:
    """``K_ij = exp(-gamma ||x_i - x'_j||^2)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    X, Xp = np.atleast_2d(np.asarray(X, float)), np.atleast_2d(np.asarray(Xp, float))
    return np.exp(-gamma * squared_distances(X, Xp))


def squared_distances(X, Xp, chunk: int = 256) -> np.ndarray:
    """Pairwise squared distances from explicit differences (exactly 0 for equal rows)."""
    out = np.empty((len(X), len(Xp)))
    for start in range(0, len(X), chunk):
        diff = X[start:start + chunk, None, :] - Xp[None, :, :]
        out[start:start + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def check_psd(gram: np.ndarray) -> None:
    sym = 0.5 * (gram + gram.T)
    if gram.shape[0] != gram.shape[1]:
        raise ValueError("gram matrix must be square")
    lo = float(np.linalg.eigvalsh(sym)[0])
    if lo < -PSD_TOL:
        raise ValueError(f"gram matrix is not positive semidefinite (smallest eigenvalue {lo:.3e})")


@dataclass
class KernelModel:
    alpha: np.ndarray  # (n_train, classes)
    bias: np.ndarray   # (classes,)
    reg_kind: str
    lam: float
    objective: float
    grad_inf_norm: float
    iterations: int

    def decision(self, gram_rows: np.ndarray) -> np.ndarray:
        """Scores for points whose kernel rows against the training set are ``gram_rows``."""
        return gram_rows @ self.alpha + self.bias

    def predict(self, gram_rows: np.ndarray) -> np.ndarray:
        return self.decision(gram_rows).argmax(axis=1)


def _one_hot(labels, n_classes):
    Y = np.zeros((len(labels), n_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


def objective(theta, gram, Y, reg_kind, lam, reg_gram=None):
    """Mean cross-entropy plus ``lam`` times the penalty; returns (value, gradient)."""
    n, C = Y.shape
    alpha, b = theta[: n * C].reshape(n, C), theta[n * C:]
    scores = gram @ alpha + b
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    value = -(Y * log_p).sum() / n
    resid = (np.exp(log_p) - Y) / n
    g_alpha = gram.T @ resid
    g_b = resid.sum(axis=0)
    if lam > 0 and reg_kind == "rkhs":
        Ka = gram @ alpha
        value += lam * float((alpha * Ka).sum())
        g_alpha = g_alpha + lam * (Ka + gram.T @ alpha)
    elif lam > 0 and reg_kind == "weighted_l2":
        m = reg_gram.shape[0]
        fz = reg_gram @ alpha + b
        value += lam * float((fz * fz).sum()) / m
        g_alpha = g_alpha + (2.0 * lam / m) * (reg_gram.T @ fz)
        g_b = g_b + (2.0 * lam / m) * fz.sum(axis=0)
    return value, np.concatenate([g_alpha.ravel(), g_b])


def kernel_preconditioner(gram: np.ndarray, n_classes: int, reg_kind: str = "none", lam: float = 0.0,
                          reg_gram=None):
    """Inverse of the class-decoupled Hessian block at ``alpha = 0``.

    ``M = K^2 / (n C) + lam R + eps I`` with ``R = 2K`` (rkhs) or
    ``(2/m) Kz^T Kz`` (weighted_l2), applied to each class column of alpha;
    identity on the bias.  ``eps`` is relative to the largest eigenvalue of
    ``K^2 / (n C)`` and keeps the map well defined when ``K`` is singular.
    """
    n = gram.shape[0]
    K = 0.5 * (gram + gram.T)
    M = K @ K / (n * n_classes)
    if lam > 0 and reg_kind == "rkhs":
        M += 2.0 * lam * K
    elif lam > 0 and reg_kind == "weighted_l2":
        M += (2.0 * lam / reg_gram.shape[0]) * (reg_gram.T @ reg_gram)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.clip(w, 0.0, None)
    top = np.linalg.eigvalsh(K)[-1] ** 2 / (n * n_classes)
    inv = 1.0 / (w + PRECOND_EPS * max(top, 1e-300))

    def apply(v):
        A = v[: n * n_classes].reshape(n, n_classes)
        return np.concatenate([(V @ (inv[:, None] * (V.T @ A))).ravel(), v[n * n_classes:]])

    return apply


def train_klr(gram_train, labels, reg_kind: str = "rkhs", lam: float = 0.0, reg_gram=None,
              tol: float = 1e-6, n_classes: int | None = None, max_iter: int = 5000,
              theta0=None, precondition: bool = True) -> KernelModel:
    """Fit the model; ``reg_gram[j, i] = K(z_j, x_i)`` for weighted_l2."""
    if reg_kind not in REG_KINDS:
        raise ValueError(f"unknown regularizer {reg_kind!r}; expected one of {REG_KINDS}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    gram = np.asarray(gram_train, dtype=np.float64)
    labels = np.asarray(labels)
    check_psd(gram)
    if gram.shape[0] != len(labels):
        raise ValueError("gram and labels disagree on the number of samples")
    C = int(n_classes if n_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError("labels must lie in 0..classes-1")
    if reg_kind == "weighted_l2" and lam > 0:
        if reg_gram is None or reg_gram.shape[1] != gram.shape[0]:
            raise ValueError("weighted_l2 needs reg_gram of shape (m, n_train)")
    Y = _one_hot(labels, C)
    n = gram.shape[0]
    theta0 = np.zeros(n * C + C) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    res = lbfgs.minimize(lambda t: objective(t, gram, Y, reg_kind, lam, reg_gram), theta0,
                         tol=tol, max_iter=max_iter,
                         precondition=kernel_preconditioner(gram, C, reg_kind, lam, reg_gram) if precondition else None)
    return KernelModel(res.x[: n * C].reshape(n, C), res.x[n * C:], reg_kind, lam, res.f,
                       float(np.max(np.abs(res.grad))), res.iterations)


def accuracy(model: KernelModel, gram_rows, labels) -> float:
    return float(np.mean(model.predict(gram_rows) == np.asarray(labels)))


def cross_validate(X, y, reg_kind: str, lambdas, gamma: float, folds: int = 3, reg_X=None,
                   rng: np.random.Generator | None = None, n_classes: int | None = None,
                   tol: float = 1e-6, max_iter: int = 5000) -> float:
    """Lambda from ``lambdas`` with the best mean fold accuracy (ties: smallest lambda)."""
    lambdas = sorted(float(v) for v in lambdas)
    if not lambdas:
        raise ValueError("empty lambda grid")
    if len(lambdas) == 1:
        return lambdas[0]
    X, y = np.asarray(X, float), np.asarray(y)
    C = int(n_classes if n_classes is not None else y.max() + 1)
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(len(y))
    parts = np.array_split(order, folds)
    full = rbf_gram(X, X, gamma)
    reg_full = rbf_gram(reg_X, X, gamma) if reg_X is not None else None
    best, best_acc = lambdas[0], -1.0
    for lam in lambdas:
        accs = []
        for k in range(folds):
            test = parts[k]
            train = np.concatenate([parts[j] for j in range(folds) if j != k])
            reg_gram = reg_full[:, train] if reg_full is not None else None
            model = train_klr(full[np.ix_(train, train)], y[train], reg_kind, lam, reg_gram,
                              tol=tol, n_classes=C, max_iter=max_iter)
            accs.append(accuracy(model, full[np.ix_(test, train)], y[test]))
        acc = float(np.mean(accs))
        if acc > best_acc:
            best, best_acc = lam, acc
    return best


def make_blobs(n_classes: int = 17, per_class: int = 80, dim: int = 10, spread: float = 1.0,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs: class centres ~ N(0, I), points ~ N(centre, spread^2 I)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    centres = rng.standard_normal((n_classes, dim))
    y = np.repeat(np.arange(n_classes), per_class)
    X = centres[y] + spread * rng.standard_normal((len(y), dim))
    return X, y


def median_gamma(X, scale: float = 1.0) -> float:
    """``scale`` over the median pairwise squared distance of the rows of ``X``."""
    X = np.asarray(X, float)
    sq = squared_distances(X, X)
    return scale / float(np.median(sq[np.triu_indices(len(X), 1)]))


@dataclass(frozen=True)
class KlrProtocol:
    n_splits: int = 10
    seed: int = 0
    lambdas: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
    pool_fractions: tuple[float, ...] = (0.2, 0.35, 0.5, 0.7)
    reg_kinds: tuple[str, ...] = REG_KINDS
    n_classes: int = 17
    per_class: int = 80
    dim: int = 20
    spread: float = 1.0
    label_noise: float = 0.0
    gamma_scale: float = 1.0
    train_fraction: float = 0.1
    test_fraction: float = 0.2
    tol: float = 1e-6
    max_iter: int = 20000


class KlrRow(NamedTuple):
    split: int
    reg_kind: str
    pool_fraction: float
    lam: float
    accuracy: float
    iterations: int


def run_protocol(p: KlrProtocol) -> list[KlrRow]:
    """Train/test/pool splits of one blob data set; lambda chosen by 3-fold CV.

    The pool fraction is relative to the whole data set and only affects
    ``weighted_l2`` (other kinds report 0).  Training labels are flipped to
    a uniformly random class with probability ``label_noise``.
    """
    X, y = make_blobs(p.n_classes, p.per_class, p.dim, p.spread, rng=np.random.default_rng(p.seed))
    n = len(y)
    n_train, n_test = int(round(p.train_fraction * n)), int(round(p.test_fraction * n))
    if max(p.pool_fractions, default=0.0) * n > n - n_train - n_test + 1e-9:
        raise ValueError("pool fraction larger than the data left after train/test")
    rows = []
    for split in range(p.n_splits):
        rng = np.random.default_rng([p.seed, split])
        order = rng.permutation(n)
        tr, te, rest = order[:n_train], order[n_train:n_train + n_test], order[n_train + n_test:]
        y_tr = y[tr].copy()
        flip = rng.random(len(tr)) < p.label_noise
        y_tr[flip] = rng.integers(0, p.n_classes, int(flip.sum()))
        gamma = median_gamma(X[tr], p.gamma_scale)
        gram = rbf_gram(X[tr], X[tr], gamma)
        gram_te = rbf_gram(X[te], X[tr], gamma)
        for kind in p.reg_kinds:
            fractions = p.pool_fractions if kind == "weighted_l2" else (0.0,)
            for frac in fractions:
                pool = rest[: int(round(frac * n))] if kind == "weighted_l2" else None
                reg_X = X[pool] if pool is not None else None
                cv_rng = np.random.default_rng([p.seed, split, 1])
                lam = 0.0 if kind == "none" else cross_validate(
                    X[tr], y_tr, kind, p.lambdas, gamma, reg_X=reg_X, rng=cv_rng,
                    n_classes=p.n_classes, tol=p.tol, max_iter=p.max_iter)
                reg_gram = rbf_gram(reg_X, X[tr], gamma) if reg_X is not None else None
                model = train_klr(gram, y_tr, kind, lam, reg_gram, tol=p.tol, n_classes=p.n_classes,
                                  max_iter=p.max_iter)
                rows.append(KlrRow(split, kind, frac, lam, accuracy(model, gram_te, y[te]),
                                   model.iterations))
    return rows


def summarize_protocol(rows) -> dict[str, tuple[float, float]]:
    """Mean and std (ddof=0) of test accuracy per regularizer kind."""
    out = {}
    for kind in dict.fromkeys(r.reg_kind for r in rows):
        acc = np.array([r.accuracy for r in rows if r.reg_kind == kind])
        out[kind] = (float(acc.mean()), float(acc.std()))
    return out
