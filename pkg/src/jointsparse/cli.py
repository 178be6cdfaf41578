"""Command-line entry point.

Each command writes a result file plus a ``<result>.meta`` sidecar whose
``[config]`` section lists every resolved option; ``--config <sidecar>``
re-runs the command with exactly those options.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import __version__
from .effects import ConvergenceError, two_stage_pipeline
from .experiments import (
    LAMBDA_NOTE,
    PHASE_COLUMNS,
    PhaseDiagramSpec,
    phase_rows,
    run_phase_diagram,
    run_scaling_sweep,
    run_subset_oracle,
)
from .io import (
    fmt,
    ingest_csv,
    metadata_path,
    read_metadata,
    write_metadata,
    write_support,
    write_synth_truth,
    export_csv,
    write_table,
)
from .model import DataError, partition_by_treatment
from .selection import SelectionConfig, SelectionError, select, select_by_treatment_regression
from .solver import SolverConfig, SolverError
from .synth import SynthSpec, generate

logger = logging.getLogger("jointsparse")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def int_list(s: str) -> list[int]:
    out = []
    for part in str(s).split(","):
        part = part.strip()
        if not part:
            continue
        if part == "...":
            # "200,400,...,6400": continue the geometric progression
            if len(out) < 2:
                raise argparse.ArgumentTypeError("'...' needs two leading values")
            out.append(None)
            continue
        out.append(int(part))
    if None in out:
        i = out.index(None)
        if i + 1 >= len(out) or out[i - 2] <= 0:
            raise argparse.ArgumentTypeError("'...' needs a final value")
        a, b, end = out[i - 2], out[i - 1], out[i + 1]
        ratio = b / a
        seq = [a, b]
        while True:
            nxt = int(round(seq[-1] * ratio))
            if nxt > end or nxt <= seq[-1]:
                break
            seq.append(nxt)
        if seq[-1] != end:
            seq.append(end)
        out = out[: i - 2] + seq + out[i + 2:]
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def float_list(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    return str(s).strip().lower() in ("1", "true", "yes", "on")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key-value file (a .meta sidecar works) supplying any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=0, help="worker processes (0 = all cores)")
    p.add_argument("--verbose", action="store_true")


def _selection_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=["joint", "independent"], default="joint")
    p.add_argument("--penalty", choices=["MCP", "SCAD", "L1"], default="MCP")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--cv", type=int, default=5, help="CV folds (0 = first grid value)")
    p.add_argument("--lambda-grid", type=float_list, default=None)
    p.add_argument("--n-lambda", type=int, default=30)
    p.add_argument("--standardize", type=_bool, default=True)
    p.add_argument("--prox-scaling", choices=["step", "paper_literal"], default="step")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jointsparse", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("select", help="select the adjustment covariate set from a CSV")
    _common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--treatment", required=True)
    s.add_argument("--outcome", required=True)
    s.add_argument("--out", default="support.txt")
    s.add_argument("--top-m", type=int, default=None,
                   help="use the treatment-regression baseline and keep this many covariates")
    _selection_flags(s)

    e = sub.add_parser("estimate", help="two-stage selection + effect estimation")
    _common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--treatment", required=True)
    e.add_argument("--outcome", required=True)
    e.add_argument("--method", choices=["dr", "plugin"], default="dr")
    e.add_argument("--select-frac", type=float, default=0.2)
    e.add_argument("--splits", type=int, default=20)
    e.add_argument("--ridge", type=float, default=1.0)
    e.add_argument("--propensity-on", choices=["support", "full"], default="support")
    e.add_argument("--out", default="effects.csv")
    _selection_flags(e)

    pd = sub.add_parser("phase-diagram", help="support-recovery probability over an (n, p) grid")
    _common(pd)
    pd.add_argument("--p", type=int_list, required=True)
    pd.add_argument("--n", type=int_list, required=True)
    pd.add_argument("--q", type=int, default=2)
    pd.add_argument("--k", type=int, default=10)
    pd.add_argument("--trials", type=int, default=25)
    pd.add_argument("--mode", choices=["joint", "independent"], default="joint")
    pd.add_argument("--lambda-policy", choices=["theory", "cv", "fixed"], default="theory")
    pd.add_argument("--lambda-c", type=float, default=None)
    pd.add_argument("--lambda-value", type=float, default=None)
    pd.add_argument("--noise-sigma", type=float, default=1.0)
    pd.add_argument("--coef-scale", type=float, default=1.0)
    pd.add_argument("--phi-scale", type=float, default=1.0)
    pd.add_argument("--calibration-trials", type=int, default=5)
    pd.add_argument("--out", default="phase_diagram.csv")

    sc = sub.add_parser("scaling", help="coefficient error versus n at the theory lambda")
    _common(sc)
    sc.add_argument("--p", type=int, default=128)
    sc.add_argument("--k", type=int, default=10)
    sc.add_argument("--q", type=int, default=2)
    sc.add_argument("--n", type=int_list, required=True)
    sc.add_argument("--trials", type=int, default=30)
    sc.add_argument("--noise-sigma", type=float, default=1.0)
    sc.add_argument("--coef-scale", type=float, default=1.0)
    sc.add_argument("--lambda-c", type=float, default=1.5)
    sc.add_argument("--oracle", type=_bool, default=False)
    sc.add_argument("--out", default="scaling.csv")

    so = sub.add_parser("subset-oracle", help="compare the joint fit with exhaustive best-subset search")
    _common(so)
    so.add_argument("--p", type=int, default=6)
    so.add_argument("--q", type=int, default=2)
    so.add_argument("--k", type=int, default=2)
    so.add_argument("--n", type=int, default=2000)
    so.add_argument("--trials", type=int, default=100)
    so.add_argument("--noise-sigma", type=float, default=0.5)
    so.add_argument("--coef-scale", type=float, default=2.0)
    so.add_argument("--lambda-c", type=float, default=1.5)
    so.add_argument("--out", default="subset_oracle.csv")

    g = sub.add_parser("generate", help="write a synthetic dataset and its ground-truth sidecar")
    _common(g)
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--q", type=int, default=2)
    g.add_argument("--k", type=int, default=10)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--noise-sigma", type=float, default=1.0)
    g.add_argument("--coef-scale", type=float, default=1.0)
    g.add_argument("--phi-scale", type=float, default=1.0)
    g.add_argument("--out", default="synthetic.csv")
    return ap


NON_CONFIG = {"config", "verbose", "threads", "func"}


def _resolved(args) -> dict:
    return {k.replace("_", "-"): v for k, v in sorted(vars(args).items()) if k not in NON_CONFIG}



def _config_file(argv) -> str | None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def parse(argv):
    """Parse ``argv``; keys from ``--config`` act as flags placed before the explicit ones."""
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_file(argv)
    if not path:
        return ap.parse_args(argv)
    commands = ap._subparsers._group_actions[0].choices
    i = next((k for k, a in enumerate(argv) if a in commands), None)
    if i is None:
        return ap.parse_args(argv)
    command = argv[i]
    cfg, _ = read_metadata(path)
    cmd = cfg.pop("command", command)
    if cmd != command:
        raise UsageError(f"config file is for command {cmd!r}, not {command!r}")
    known = {a.dest for a in commands[command]._actions}
    injected = []
    for k, v in cfg.items():
        if k.replace("-", "_") not in known:
            raise UsageError(f"unknown config key {k!r}")
        if v != "":
            injected += [f"--{k}", v]
    return ap.parse_args(argv[:i + 1] + injected + argv[i + 1:])


def _selection_config(args) -> SelectionConfig:
    return SelectionConfig(
        mode=args.mode,
        lambda_grid=tuple(args.lambda_grid) if args.lambda_grid else None,
        cv_folds=args.cv or None,
        reg_kind=args.penalty,
        gamma=args.gamma,
        solver=SolverConfig(prox_scaling=args.prox_scaling),
        standardize=args.standardize,
        n_lambda=args.n_lambda,
        seed=args.seed,
    )


def cmd_select(args) -> int:
    data = ingest_csv(args.data, args.treatment, args.outcome)
    names = data.column_names()
    if args.top_m:
        support = select_by_treatment_regression(data, args.top_m)
        lam = float("nan")
    else:
        res = select(partition_by_treatment(data), _selection_config(args))
        support, lam = res.support, res.chosen_lambda
    write_support(args.out, support, names)
    write_metadata(metadata_path(args.out), _resolved(args), {
        "code_version": __version__,
        "chosen_lambda": lam,
        "support_size": len(support),
        "support": [names[i] for i in support],
        "treatment_labels": list(data.labels or ()),
        "standardized": args.standardize,
    })
    print(f"chosen lambda: {fmt(lam)}")
    print(f"|S| = {len(support)} of {data.p}")
    print("selected: " + ", ".join(names[i] for i in support))
    return 0


def cmd_estimate(args) -> int:
    data = ingest_csv(args.data, args.treatment, args.outcome)
    est = two_stage_pipeline(data, args.select_frac, _selection_config(args), args.method, args.splits,
                             args.seed, args.ridge, args.propensity_on)
    labels = data.labels or tuple(str(j) for j in range(data.q))
    rows = []
    for (t, s), v in sorted(est.pairwise.items()):
        if t == s:
            continue
        sd = est.std_dev[(t, s)] if est.std_dev else float("nan")
        rows.append((labels[t], labels[s], v, sd))
    write_table(args.out, ("treatment", "baseline", "effect", "std_dev"), rows)
    write_metadata(metadata_path(args.out), _resolved(args), {
        "code_version": __version__,
        "method": est.method,
        "splits": est.n_splits,
        "mean_support_size": est.metadata["mean_support_size"],
        "treatment_labels": list(labels),
        "warnings": " | ".join(est.metadata["warnings"]),
    })
    for t, s, v, sd in rows:
        print(f"{t} vs {s}: {v:.4f} ({sd:.4f})")
    print(f"mean |S| = {est.metadata['mean_support_size']:.2f}")
    return 0


def cmd_phase_diagram(args) -> int:
    spec = PhaseDiagramSpec(
        n_grid=tuple(args.n), p_grid=tuple(args.p), q=args.q, k=args.k, trials=args.trials, mode=args.mode,
        base_seed=args.seed, lambda_policy=args.lambda_policy, lambda_c=args.lambda_c,
        lambda_value=args.lambda_value, noise_sigma=args.noise_sigma, coef_scale=args.coef_scale,
        phi_scale=args.phi_scale, calibration_trials=args.calibration_trials,
    )
    res = run_phase_diagram(spec, threads=args.threads or None)
    write_table(args.out, PHASE_COLUMNS, phase_rows(spec, res))
    write_metadata(metadata_path(args.out), _resolved(args), res.metadata)
    for c in res.cells:
        print(f"n={c['n']:>7} p={c['p']:>6}  P(recover)={c['recovery_probability']:.2f}")
    return 0


def cmd_scaling(args) -> int:
    res = run_scaling_sweep(args.p, args.k, args.q, args.n, args.trials, args.seed, args.noise_sigma,
                            args.coef_scale, args.lambda_c, args.oracle, threads=args.threads or None)
    write_table(args.out, ("n", "trials", "mean_error_inf_inf"),
                [(r["n"], r["trials"], r["mean_error"]) for r in res.rows])
    run = dict(res.metadata)
    if res.slope is not None:
        run["slope"] = res.slope
    write_metadata(metadata_path(args.out), _resolved(args), run)
    for r in res.rows:
        print(f"n={r['n']:>7}  mean error={r['mean_error']:.5g}")
    print(f"log-log slope: {res.slope:.3f}" if res.slope is not None else "log-log slope: undefined")
    return 0


def cmd_subset_oracle(args) -> int:
    rows = run_subset_oracle(args.p, args.q, args.k, args.n, args.trials, args.seed, args.noise_sigma,
                             args.coef_scale, args.lambda_c, threads=args.threads or None)
    write_table(args.out, ("trial", "match", "fit_support", "oracle_support", "true_support"),
                [(r["trial"], r["match"], " ".join(map(str, r["fit_support"])),
                  " ".join(map(str, r["oracle_support"])), " ".join(map(str, r["true_support"]))) for r in rows])
    matches = sum(r["match"] for r in rows)
    write_metadata(metadata_path(args.out), _resolved(args),
                   {"code_version": __version__, "matches": matches, "lambda_note": LAMBDA_NOTE})
    print(f"joint fit matched best subset in {matches}/{len(rows)} trials")
    return 0


def cmd_generate(args) -> int:
    draw = generate(SynthSpec(p=args.p, q=args.q, k=args.k, n=args.n, seed=args.seed, noise_sigma=args.noise_sigma,
                              coef_scale=args.coef_scale, phi_scale=args.phi_scale))
    export_csv(draw.data, args.out)
    write_synth_truth(metadata_path(args.out), draw)
    print(f"wrote {args.n} rows to {args.out}")
    return 0


COMMANDS = {
    "select": cmd_select,
    "estimate": cmd_estimate,
    "phase-diagram": cmd_phase_diagram,
    "scaling": cmd_scaling,
    "subset-oracle": cmd_subset_oracle,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"jointsparse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (argparse.ArgumentTypeError, ValueError) as exc:
        print(f"jointsparse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (DataError, FileNotFoundError) as exc:
        print(f"jointsparse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, SelectionError, ConvergenceError, np.linalg.LinAlgError) as exc:
        print(f"jointsparse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"jointsparse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
