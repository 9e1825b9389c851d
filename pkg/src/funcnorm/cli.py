"""Command-line entry point: ``funcnorm <subcommand> ...``.

Every subcommand writes CSV (to ``--out`` or stdout) and exits non-zero
with a one-line diagnostic on error.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import bound, harness, kernel_logreg, sat_reduction, samplers
from .gradcheck import run_gradcheck
from .network import load_checkpoint


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _write(path, header, rows) -> None:
    if path in (None, "-"):
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([harness._fmt(v) for v in row])
    else:
        harness.write_rows(path, header, rows)


# ---------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    changes = {}
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output"] = args.out
    cfg = harness.with_overrides(cfg, **changes)
    result = harness.run_experiment(cfg)
    out = Path(cfg.output)
    summary_path, trials_path = harness.companion_paths(out)
    harness.emit_csv(result.log, out, wall_time=args.wall_time)
    harness.emit_summary(result, summary_path)
    harness.emit_trials(result, trials_path)
    errors = result.final_errors()
    mean = float(errors.mean()) if errors.size else math.nan
    print(f"trials={cfg.trials} diverged={result.n_diverged} "
          f"chance_level={sum(t.chance_level for t in result.trials)} "
          f"mean_final_test_error={mean:.4f}", file=sys.stderr)
    print(f"wrote {out}, {summary_path}, {trials_path}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- klr

def cmd_klr(args) -> int:
    p = kernel_logreg.KlrProtocol(
        n_splits=args.splits, seed=args.seed, lambdas=args.lambdas, pool_fractions=args.pool_fraction,
        reg_kinds=tuple(args.reg), n_classes=args.classes, per_class=args.per_class, dim=args.dim,
        spread=args.spread, label_noise=args.label_noise, gamma_scale=args.gamma_scale, tol=args.tol)
    rows = kernel_logreg.run_protocol(p)
    _write(args.out, kernel_logreg.KlrRow._fields, rows)
    for kind, (mean, std) in kernel_logreg.summarize_protocol(rows).items():
        print(f"{kind}: accuracy {mean:.4f} +/- {std:.4f}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- sat-norm

def cmd_sat_norm(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.cnf:
        instances = [(Path(f).name, sat_reduction.parse_dimacs(Path(f).read_text())) for f in args.cnf]
    elif args.random:
        p, c = args.random
        instances = [(f"random{i}", sat_reduction.random_cnf3(p, c, rng)) for i in range(args.count)]
    else:
        raise ValueError("give DIMACS files or --random VARS CLAUSES")
    rows, disagreements = [], 0
    for name, cnf in instances:
        net = sat_reduction.compile(cnf, eps=args.eps, truncated=args.truncate)
        sat, _ = sat_reduction.brute_force_sat(cnf)
        top = sat_reduction.corner_max(net)
        est = sat_reduction.mc_norm_estimate(net, args.samples, rng, q=args.q)
        # the truncated net may lose the exact 1 at a corner, so only non-zeroness is compared there
        corner_says = top > 0 if args.truncate else top == 1.0
        agree = sat == corner_says == (est > 0)
        disagreements += not agree
        rows.append((name, cnf.num_vars, cnf.num_clauses, "SAT" if sat else "UNSAT", top, est,
                     "agree" if agree else "DISAGREE"))
    _write(args.out, ("instance", "num_vars", "num_clauses", "oracle", "corner_max", "norm_estimate", "verdict"),
           rows)
    return 1 if disagreements else 0


# ---------------------------------------------------------------- bound

BOUND_KEYS = ("A", "B", "D", "delta", "N", "K", "C")


def _read_keyvalues(path) -> dict[str, str]:
    """``key = value`` lines with ``#`` comments."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key not in BOUND_KEYS:
            raise ValueError(f"{path}:{lineno}: expected one of {', '.join(BOUND_KEYS)} = value")
        out[key] = value
    return out


def cmd_bound(args) -> int:
    if args.config:
        for key, value in _read_keyvalues(args.config).items():
            if getattr(args, key) is None:  # flags win over the file
                setattr(args, key, int(value) if key == "N" else float(value))
    if args.N is None:
        raise ValueError("missing N")
    A, B, D = args.A, args.B, args.D
    if args.checkpoint:
        params, spec = load_checkpoint(args.checkpoint)
        q = samplers.fit(samplers.SamplerSpec("gaussian_fixed", args.q_mean, args.q_var), dim=spec.input_dim)
        A, B = bound.estimate_A_B(params, spec, q, args.m, np.random.default_rng(args.seed))
        if D is None:
            D = samplers.chi2_divergence_term(np.full(spec.input_dim, args.p_mean),
                                              np.full(spec.input_dim, args.p_var),
                                              np.full(spec.input_dim, args.q_mean),
                                              np.full(spec.input_dim, args.q_var))
    missing = [n for n, v in (("A", A), ("B", B), ("D", D)) if v is None]
    if missing:
        raise ValueError(f"missing {', '.join(missing)} (give them or a --checkpoint)")
    C = args.C if args.C is not None else bound.default_loss_at_zero(args.classes)
    delta = args.delta if args.delta is not None else 0.05
    K = args.K if args.K is not None else bound.DEFAULT_LIPSCHITZ
    inputs = bound.BoundInputs(A, B, D, delta, args.N, K, C)
    gap = bound.generalization_gap_bound(inputs) if math.isfinite(D) else math.inf
    _write(args.out, ("A", "B", "D", "delta", "N", "K", "C", "gap"), [(A, B, D, delta, args.N, K, C, gap)])
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.nets, args.seed, max_coords=args.max_coords or None)
    _write(args.out, ("net", "kind", "n_params", "n_checked", "n_excluded", "n_tiny", "max_rel_err", "passed"),
           [(r.net, r.kind, r.n_params, r.n_checked, r.n_excluded, r.n_tiny, r.max_rel_err, r.passed)
            for r in reports])
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="funcnorm", description="Function-norm regularization experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="seeded multi-trial MLP training from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="metrics CSV (default: output.path of the config)")
    t.add_argument("--trials", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--wall-time", action="store_true", help="add a wall_time column (not reproducible)")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("klr", help="kernel logistic regression on synthetic blobs")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--splits", type=int, default=10)
    k.add_argument("--lambdas", type=_floats, default=kernel_logreg.KlrProtocol.lambdas)
    k.add_argument("--reg", nargs="+", choices=kernel_logreg.REG_KINDS, default=list(kernel_logreg.REG_KINDS))
    k.add_argument("--pool-fraction", type=_floats, default=kernel_logreg.KlrProtocol.pool_fractions)
    k.add_argument("--classes", type=int, default=kernel_logreg.KlrProtocol.n_classes)
    k.add_argument("--per-class", type=int, default=kernel_logreg.KlrProtocol.per_class)
    k.add_argument("--dim", type=int, default=kernel_logreg.KlrProtocol.dim)
    k.add_argument("--spread", type=float, default=kernel_logreg.KlrProtocol.spread)
    k.add_argument("--label-noise", type=float, default=kernel_logreg.KlrProtocol.label_noise)
    k.add_argument("--gamma-scale", type=float, default=kernel_logreg.KlrProtocol.gamma_scale)
    k.add_argument("--tol", type=float, default=kernel_logreg.KlrProtocol.tol)
    k.add_argument("--out", default="-")
    k.set_defaults(func=cmd_klr)

    s = sub.add_parser("sat-norm", help="compile 3-CNF formulas to ReLU nets and estimate their norm")
    s.add_argument("cnf", nargs="*", help="DIMACS files")
    s.add_argument("--random", nargs=2, type=int, metavar=("VARS", "CLAUSES"),
                   help="generate random instances instead of reading files")
    s.add_argument("--count", type=int, default=1, help="number of random instances")
    s.add_argument("--eps", type=float, default=sat_reduction.DEFAULT_EPS)
    s.add_argument("--samples", "--m", type=int, default=100_000)
    s.add_argument("--q", choices=("mixture", "uniform"), default="mixture")
    s.add_argument("--truncate", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_sat_norm)

    b = sub.add_parser("bound", help="generalization-gap bound")
    b.add_argument("--A", type=float)
    b.add_argument("--B", type=float)
    b.add_argument("--D", type=float)
    b.add_argument("--config", help="file of 'key = value' lines for A, B, D, delta, N, K, C")
    b.add_argument("--delta", type=float)
    b.add_argument("--N", type=int)
    b.add_argument("--K", type=float)
    b.add_argument("--C", type=float, help="loss at zero output (default ln(classes))")
    b.add_argument("--classes", type=int, default=10)
    b.add_argument("--checkpoint", help="estimate A and B for this network under a Gaussian Q")
    b.add_argument("--q-mean", type=float, default=0.0)
    b.add_argument("--q-var", type=float, default=1.0)
    b.add_argument("--p-mean", type=float, default=0.0)
    b.add_argument("--p-var", type=float, default=1.0)
    b.add_argument("--m", type=int, default=10_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="-")
    b.set_defaults(func=cmd_bound)

    g = sub.add_parser("gradcheck", help="autodiff vs finite differences on random MLPs")
    g.add_argument("--nets", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-coords", type=int, default=150, help="coordinates sampled per check (0 = all)")
    g.add_argument("--out", default="-")
    g.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # report and exit non-zero
        print(f"funcnorm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
