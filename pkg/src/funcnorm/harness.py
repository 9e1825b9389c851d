"""Seeded multi-trial training experiments and their CSV output.

A run draws a labeled subset per trial, fits the sampling distribution,
trains an MLP with SGD + momentum and records metrics every
``eval_every`` steps.  Each trial owns six random streams spawned from
``SeedSequence([seed, trial])`` in a fixed order (subset, init, batches,
dropout, sampler, direction), so two configurations that share a seed also
share their subsets and initial weights.
"""

from __future__ import annotations

import csv
import gzip
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import samplers
from .autodiff import NumericError, Tape
from .kernel_logreg import make_blobs
from .network import MlpSpec, TapedMlp, forward, init, update_running_stats
from .regularizers import SAMPLED_KINDS, RegConfig, regularized_loss, unit_direction

DATA_DIR_ENV = "FUNCNORM_DATA_DIR"
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
STREAMS = ("subset", "init", "batches", "dropout", "sampler", "direction")


class IdxError(ValueError):
    pass


# ---------------------------------------------------------------- IDX files

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header")
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise IdxError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * k: 8 + 4 * k], "big") for k in range(ndim)]
    size = int(np.prod(dims))
    body = raw[header:]
    if len(body) < size:
        raise IdxError(f"{path}: truncated, {len(body)} of {size} data bytes present")
    if len(body) > size:
        raise IdxError(f"{path}: {len(body) - size} trailing bytes after the data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _write_idx(path, array: np.ndarray, magic: int) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    blob = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in a.shape) + a.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # fixed mtime keeps the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError("need images (n, rows, cols) and labels (n,)")
    _write_idx(images_path, images, IMAGES_MAGIC)
    _write_idx(labels_path, labels, LABELS_MAGIC)


@dataclass
class Dataset:
    images: np.ndarray  # (n, d) floats in [0, 1]
    labels: np.ndarray  # (n,) ints

    def __len__(self):
        return len(self.labels)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair (optionally gzip-compressed)."""
    images = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64))


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {name}[.gz] in {directory}")


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory holding the four standard files."""
    directory = Path(directory)
    return tuple(load_mnist_idx(_find(directory, img), _find(directory, lab))
                 for img, lab in (MNIST_FILES["train"], MNIST_FILES["test"]))


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class DataConfig:
    kind: str = "mnist"  # mnist | blobs
    dir: str | None = None  # mnist directory; falls back to $FUNCNORM_DATA_DIR
    test_limit: int = 0  # evaluate on the first n test rows (0 = all)
    classes: int = 10  # blobs only
    per_class: int = 200
    dim: int = 20
    spread: float = 1.0
    test_fraction: float = 0.5


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 5000
    eval_every: int = 100
    weight_decay: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hidden: tuple[int, ...] = (300, 100)
    dropout: float = 0.0
    batchnorm: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    sampler: samplers.SamplerSpec = field(default_factory=samplers.SamplerSpec)
    pool_size: int = 0  # pool sampler: rows outside the subset to keep (0 = all)
    subset_size: int = 100
    trials: int = 10
    seed: int = 0
    chance_error: float | None = None  # default 1 - 1.5 / classes
    output: str = "metrics.csv"

    def __post_init__(self):
        if self.subset_size < 1 or self.trials < 1:
            raise ValueError("subset_size and trials must be positive")
        if self.optim.steps < 1 or self.optim.eval_every < 1 or self.optim.batch_size < 1:
            raise ValueError("steps, eval_every and batch_size must be positive")
        if not self.optim.lr > 0 or not 0 <= self.optim.momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if self.optim.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.data.kind not in ("mnist", "blobs"):
            raise ValueError(f"unknown data kind {self.data.kind!r}")


# config key -> (section object attribute path, parser)
def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _opt_str(text: str):
    return text or None


def _opt_float(text: str):
    return None if text in ("", "auto") else float(text)


KEYS = {
    "seed": ("", "seed", int),
    "trials": ("", "trials", int),
    "subset_size": ("", "subset_size", int),
    "data.kind": ("data", "kind", str),
    "data.dir": ("data", "dir", _opt_str),
    "data.test_limit": ("data", "test_limit", int),
    "data.classes": ("data", "classes", int),
    "data.per_class": ("data", "per_class", int),
    "data.dim": ("data", "dim", int),
    "data.spread": ("data", "spread", float),
    "data.test_fraction": ("data", "test_fraction", float),
    "model.hidden": ("", "hidden", _ints),
    "model.dropout": ("", "dropout", float),
    "model.batchnorm": ("", "batchnorm", _bool),
    "optim.lr": ("optim", "lr", float),
    "optim.momentum": ("optim", "momentum", float),
    "optim.batch_size": ("optim", "batch_size", int),
    "optim.steps": ("optim", "steps", int),
    "optim.eval_every": ("optim", "eval_every", int),
    "optim.weight_decay": ("optim", "weight_decay", float),
    "reg.kind": ("reg", "kind", str),
    "reg.lambda": ("reg", "lam", float),
    "reg.batch_ratio": ("reg", "batch_ratio", float),
    "reg.sobolev_step": ("reg", "sobolev_step", float),
    "reg.direction": ("reg", "direction", str),
    "sampler.kind": ("sampler", "kind", str),
    "sampler.mean": ("sampler", "mean", float),
    "sampler.var": ("sampler", "var", float),
    "sampler.inflation": ("sampler", "inflation", float),
    "sampler.pool_size": ("", "pool_size", int),
    "output.path": ("", "output", str),
    "output.chance_error": ("", "chance_error", _opt_float),
}


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    A relative ``data.dir`` or ``output.path`` is resolved against
    ``base_dir`` when one is given.
    """
    sections: dict[str, dict] = {"": {}, "data": {}, "optim": {}, "reg": {}, "sampler": {}}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        section, attr, conv = KEYS[key]
        try:
            sections[section][attr] = conv(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    top = sections[""]
    if base_dir is not None:
        base = Path(base_dir)
        if sections["data"].get("dir") and not Path(sections["data"]["dir"]).is_absolute():
            sections["data"]["dir"] = os.path.normpath(base / sections["data"]["dir"])
        if "output" in top and not Path(top["output"]).is_absolute():
            top["output"] = os.path.normpath(base / top["output"])
    return ExperimentConfig(
        data=DataConfig(**sections["data"]),
        optim=OptimConfig(**sections["optim"]),
        reg=RegConfig(**sections["reg"]),
        sampler=samplers.SamplerSpec(**sections["sampler"]),
        **top,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def format_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config`."""
    objs = {"": cfg, "data": cfg.data, "optim": cfg.optim, "reg": cfg.reg, "sampler": cfg.sampler}
    lines = []
    for key, (section, attr, _) in KEYS.items():
        value = getattr(objs[section], attr)
        if value is None:
            text = ""
        elif isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- data

def load_data(cfg: DataConfig, seed: int = 0) -> tuple[Dataset, Dataset]:
    if cfg.kind == "blobs":
        X, y = make_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.spread,
                          rng=np.random.default_rng(seed))
        order = np.random.default_rng(seed + 1).permutation(len(y))
        n_test = int(round(cfg.test_fraction * len(y)))
        test, train = order[:n_test], order[n_test:]
        return Dataset(X[train], y[train]), Dataset(X[test], y[test])
    directory = cfg.dir or os.environ.get(DATA_DIR_ENV)
    if not directory:
        raise FileNotFoundError(f"no MNIST directory: set data.dir or ${DATA_DIR_ENV}")
    train, test = load_mnist_dir(directory)
    if cfg.test_limit:
        test = Dataset(test.images[: cfg.test_limit], test.labels[: cfg.test_limit])
    return train, test


# ---------------------------------------------------------------- metrics

class MetricRow(NamedTuple):
    trial: int
    step: int
    train_loss: float
    risk: float
    penalty: float
    lam: float
    test_error: float
    wall_time: float


CSV_COLUMNS = ("trial", "step", "train_loss", "risk", "penalty", "lambda", "test_error")


@dataclass
class MetricLog:
    rows: list[MetricRow] = field(default_factory=list)

    def trial(self, t: int) -> list[MetricRow]:
        return [r for r in self.rows if r.trial == t]


@dataclass
class TrialOutcome:
    trial: int
    diverged: bool
    diverged_step: int | None
    final_test_error: float
    chance_level: bool
    q_draws: int  # sampler calls; equals the step count for sampled penalties


@dataclass
class ExperimentResult:
    log: MetricLog
    trials: list[TrialOutcome]

    @property
    def n_diverged(self) -> int:
        return sum(t.diverged for t in self.trials)

    def final_errors(self, include_diverged: bool = False) -> np.ndarray:
        return np.array([t.final_test_error for t in self.trials
                         if include_diverged or not t.diverged])


class _CountingSampler(samplers.Sampler):
    def __init__(self, inner: samplers.Sampler):
        self.inner = inner
        self.dim = inner.dim
        self.calls = 0

    def draw(self, m, rng):
        self.calls += 1
        return self.inner.draw(m, rng)


def trial_streams(seed: int, trial: int) -> dict:
    children = np.random.SeedSequence([seed, trial]).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def draw_subset(n: int, size: int, seq) -> np.ndarray:
    if size > n:
        raise ValueError(f"subset of {size} requested from {n} rows")
    return np.sort(np.random.default_rng(seq).choice(n, size=size, replace=False))


def build_sampler(cfg: ExperimentConfig, train: Dataset, subset: np.ndarray, seq):
    """Sampler for one trial, or None when the penalty needs no samples."""
    if not (cfg.reg.active and cfg.reg.kind in SAMPLED_KINDS):
        return None
    spec = cfg.sampler
    if spec.kind == "pool":
        rest = np.setdiff1d(np.arange(len(train)), subset)
        if cfg.pool_size and cfg.pool_size < len(rest):
            rest = np.sort(np.random.default_rng(seq).choice(rest, cfg.pool_size, replace=False))
        return samplers.fit(spec, train.images[rest]), rest
    return samplers.fit(spec, train.images[subset], dim=train.images.shape[1]), None


def _error(params, spec, test: Dataset) -> float:
    logits = forward(params, spec, test.images, mode="eval")
    return float(np.mean(logits.argmax(axis=1) != test.labels))


def run_trial(cfg: ExperimentConfig, trial: int, train: Dataset, test: Dataset,
              n_classes: int) -> tuple[list[MetricRow], TrialOutcome]:
    streams = trial_streams(cfg.seed, trial)
    subset = draw_subset(len(train), cfg.subset_size, streams["subset"])
    x_all, y_all = train.images[subset], train.labels[subset]
    spec = MlpSpec((train.images.shape[1], *cfg.hidden, n_classes), cfg.dropout, cfg.batchnorm)
    params = init(spec, streams["init"])
    built = build_sampler(cfg, train, subset, streams["sampler"])
    sampler = _CountingSampler(built[0]) if built else None
    batch_rng = np.random.default_rng(streams["batches"])
    dropout_rng = np.random.default_rng(streams["dropout"])
    sampler_rng = np.random.default_rng(streams["sampler"])
    direction_rng = np.random.default_rng(streams["direction"])
    fixed_dir = unit_direction(spec.input_dim, direction_rng) if cfg.reg.direction == "fixed" else None
    opt, reg = cfg.optim, cfg.reg
    lam = reg.lam if reg.active else 0.0
    velocity = [np.zeros_like(a) for a in params.trainable()]
    chance = cfg.chance_error if cfg.chance_error is not None else 1.0 - 1.5 / n_classes
    rows: list[MetricRow] = []
    start = time.perf_counter()
    diverged_step = None
    test_error = _error(params, spec, test)
    for step in range(1, opt.steps + 1):
        batch = batch_rng.choice(len(subset), size=min(opt.batch_size, len(subset)), replace=False)
        direction = fixed_dir
        if reg.kind == "sobolev" and direction is None:
            direction = unit_direction(spec.input_dim, direction_rng)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                tape = Tape()
                model = TapedMlp(tape, params, spec)
                terms = regularized_loss(model, x_all[batch], y_all[batch], reg, sampler, sampler_rng,
                                         dropout_rng=dropout_rng, direction=direction,
                                         weight_decay=opt.weight_decay)
                grads = tape.grad(terms.total, model.leaves)
                velocity = [opt.momentum * v - opt.lr * g for v, g in zip(velocity, grads)]
                new = [a + v for a, v in zip(params.trainable(), velocity)]
                if not all(np.all(np.isfinite(a)) for a in new):
                    raise NumericError("non-finite parameters after the update")
        except NumericError:
            diverged_step = step
            break
        params = params.with_trainable(new)
        update_running_stats(params, model.last_batch_stats)
        if step % opt.eval_every == 0 or step == opt.steps:
            test_error = _error(params, spec, test)
            penalty = terms.penalty.item() if terms.penalty is not None else 0.0
            rows.append(MetricRow(trial, step, terms.total.item(), terms.risk.item(), penalty, lam,
                                  test_error, time.perf_counter() - start))
    final = test_error if diverged_step is None else math.nan
    outcome = TrialOutcome(trial, diverged_step is not None, diverged_step, final,
                           diverged_step is not None or final >= chance,
                           sampler.calls if sampler else 0)
    return rows, outcome


def run_experiment(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None) -> ExperimentResult:
    """Run every trial of ``cfg``; trials share nothing but the read-only data."""
    train, test = data if data is not None else load_data(cfg.data, cfg.seed)
    if cfg.subset_size > len(train):
        raise ValueError(f"subset_size {cfg.subset_size} exceeds the {len(train)} training rows")
    n_classes = int(max(train.labels.max(), test.labels.max()) + 1)
    log, outcomes = MetricLog(), []
    for trial in range(cfg.trials):
        rows, outcome = run_trial(cfg, trial, train, test, n_classes)
        log.rows.extend(rows)
        outcomes.append(outcome)
    return ExperimentResult(log, outcomes)


# ---------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def emit_csv(log: MetricLog, path, wall_time: bool = False) -> None:
    """One row per (trial, logged step).  Wall time is opt-in because it
    breaks byte-for-byte reproducibility."""
    header = CSV_COLUMNS + (("wall_time",) if wall_time else ())
    n = len(header)
    write_rows(path, header, (r[:n] for r in log.rows))


def read_csv(path) -> MetricLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:len(CSV_COLUMNS)]) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            wall = float(rec[7]) if len(rec) > 7 else math.nan
            rows.append(MetricRow(int(rec[0]), int(rec[1]), *(float(v) for v in rec[2:7]), wall))
    return MetricLog(rows)


SUMMARY_METRICS = ("train_loss", "penalty", "test_error")


def summarize(log: MetricLog, exclude_trials=()) -> list[tuple]:
    """Per-step (step, n, mean and std of each summary metric), std with ddof=0."""
    excluded = set(exclude_trials)
    steps = sorted({r.step for r in log.rows})
    out = []
    for step in steps:
        rs = [r for r in log.rows if r.step == step and r.trial not in excluded]
        if not rs:
            continue
        row = [step, len(rs)]
        for name in SUMMARY_METRICS:
            vals = np.array([getattr(r, name) for r in rs])
            row += [float(vals.mean()), float(vals.std())]
        out.append(tuple(row))
    return out


def emit_summary(result: ExperimentResult, path) -> None:
    """Mean and std across trials per step; diverged trials are left out."""
    diverged = [t.trial for t in result.trials if t.diverged]
    header = ["step", "n_trials"]
    for name in SUMMARY_METRICS:
        header += [f"{name}_mean", f"{name}_std"]
    write_rows(path, header, summarize(result.log, diverged))


def emit_trials(result: ExperimentResult, path) -> None:
    header = [f.name for f in fields(TrialOutcome)]
    write_rows(path, header, ([getattr(t, h) for h in header] for t in result.trials))


def companion_paths(path) -> tuple[Path, Path]:
    """Summary and per-trial CSV paths next to a metrics CSV."""
    p = Path(path)
    stem = p.with_suffix("")
    return Path(f"{stem}.summary.csv"), Path(f"{stem}.trials.csv")


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **changes)
