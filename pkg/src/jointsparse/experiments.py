"""Seeded Monte-Carlo experiments: support-recovery phase diagrams, error-rate
sweeps and a brute-force best-subset comparison.

Every trial draws its data from its own stream keyed by the base seed and the
trial coordinates, so tables do not depend on scheduling or thread count.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import __version__
from .effects import lemma_bound, plugin_ate
from .model import DataError, compute_moments, norm_infinf, partition_by_treatment
from .selection import SelectionConfig, SelectionError, select
from .solver import SolverError, SupportSet, fit_restricted
from .synth import SynthSpec, generate, stream_key

logger = logging.getLogger(__name__)

DEFAULT_THEORY_C = 1.5
CALIBRATION_GRID = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0, 4.0)
LAMBDA_NOTE = "theory-policy lambda = c*sqrt(q*log(p)/n_min); c is a calibrated stand-in, not a published value"
TRIAL_ERRORS = (DataError, SolverError, SelectionError, np.linalg.LinAlgError)


def theory_lambda(c: float, p: int, q: int, n: int) -> float:
    """``c * sqrt(q log p / n)`` with ``n`` the smallest cohort size."""
    return c * math.sqrt(q * math.log(p) / n)


def _map(fn, items, threads: int | None):
    items = list(items)
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))


@dataclass(frozen=True)
class PhaseDiagramSpec:
    n_grid: tuple
    p_grid: tuple
    q: int = 2
    k: int = 10
    trials: int = 25
    mode: str = "joint"
    base_seed: int = 0
    lambda_policy: str = "theory"
    lambda_c: float | None = None
    lambda_value: float | None = None
    noise_sigma: float = 1.0
    coef_scale: float = 1.0
    phi_scale: float = 1.0
    reg_kind: str = "MCP"
    gamma: float | None = None
    cv_folds: int = 5
    calibration_trials: int = 5

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(v) for v in self.n_grid))
        object.__setattr__(self, "p_grid", tuple(int(v) for v in self.p_grid))
        if not self.n_grid or not self.p_grid:
            raise ValueError("n and p grids must be nonempty")
        if list(self.n_grid) != sorted(self.n_grid) or list(self.p_grid) != sorted(self.p_grid):
            raise ValueError("grids must be ascending")
        if self.k > min(self.p_grid):
            raise ValueError("k exceeds the smallest p")
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if self.mode not in ("joint", "independent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lambda_policy not in ("theory", "cv", "fixed"):
            raise ValueError(f"unknown lambda policy {self.lambda_policy!r}")
        if self.lambda_policy == "fixed" and not self.lambda_value:
            raise ValueError("fixed lambda policy needs lambda_value")


@dataclass
class PhaseDiagramResult:
    cells: list  # dicts: n, p, recovery_probability, trials, mean_support_jaccard, failures
    metadata: dict = field(default_factory=dict)

    def probability(self, n: int, p: int) -> float:
        for c in self.cells:
            if c["n"] == n and c["p"] == p:
                return c["recovery_probability"]
        raise KeyError((n, p))


def trial_seed(base_seed: int, n: int, p: int, trial: int) -> int:
    return stream_key(base_seed, "trial", n, p, trial)


def _synth_spec(spec: PhaseDiagramSpec, n: int, p: int, seed: int) -> SynthSpec:
    return SynthSpec(p=p, q=spec.q, k=spec.k, n=n, seed=seed, noise_sigma=spec.noise_sigma,
                     coef_scale=spec.coef_scale, phi_scale=spec.phi_scale)


def _selection_config(spec: PhaseDiagramSpec, data_cohorts, p: int, c: float | None) -> SelectionConfig:
    q_fit = spec.q if spec.mode == "joint" else 1
    if spec.lambda_policy == "theory":
        grid = (theory_lambda(c, p, q_fit, min(data_cohorts.sizes)),)
        return SelectionConfig(mode=spec.mode, lambda_grid=grid, reg_kind=spec.reg_kind, gamma=spec.gamma)
    if spec.lambda_policy == "fixed":
        return SelectionConfig(mode=spec.mode, lambda_grid=(spec.lambda_value,), reg_kind=spec.reg_kind,
                               gamma=spec.gamma)
    return SelectionConfig(mode=spec.mode, cv_folds=spec.cv_folds, reg_kind=spec.reg_kind, gamma=spec.gamma)


def _run_trial(args):
    spec, n, p, trial, c = args
    draw = generate(_synth_spec(spec, n, p, trial_seed(spec.base_seed, n, p, trial)))
    try:
        cohorts = partition_by_treatment(draw.data)
        res = select(cohorts, _selection_config(spec, cohorts, p, c))
    except TRIAL_ERRORS as exc:
        return 0, 0.0, 1, f"{type(exc).__name__}: {exc}"
    return int(res.support == draw.true_support), res.support.jaccard(draw.true_support), 0, ""


def _calibration_args(spec: PhaseDiagramSpec, c_grid):
    p = spec.p_grid[0]
    # calibration draws use their own streams, disjoint from the reported trials
    cal_seed = stream_key(spec.base_seed, "calibration")
    cal = PhaseDiagramSpec(**{**asdict(spec), "base_seed": cal_seed, "trials": spec.calibration_trials})
    return [(cal, n, p, t, c) for c in c_grid for n in spec.n_grid for t in range(spec.calibration_trials)]


def calibrate_theory_c(spec: PhaseDiagramSpec, c_grid=CALIBRATION_GRID, threads: int | None = 1) -> float:
    """Coarse search for the theory-policy constant on the smallest ``p``.

    Scores each candidate by exact-recovery rate over the ``n`` grid (mean
    Jaccard breaks ties); remaining ties go to the larger constant.
    """
    args = _calibration_args(spec, c_grid)
    out = _map(_run_trial, args, threads)
    per = len(spec.n_grid) * spec.calibration_trials
    best, best_score = None, None
    for i, c in enumerate(c_grid):
        chunk = out[i * per:(i + 1) * per]
        score = (sum(r[0] for r in chunk) / per, sum(r[1] for r in chunk) / per)
        if best_score is None or score >= best_score:
            best, best_score = c, score
    return float(best)


def run_phase_diagram(spec: PhaseDiagramSpec, threads: int | None = 1) -> PhaseDiagramResult:
    c = spec.lambda_c
    calibrated = False
    if spec.lambda_policy == "theory" and c is None:
        c = calibrate_theory_c(spec, threads=threads)
        calibrated = True
    args = [(spec, n, p, t, c) for p in spec.p_grid for n in spec.n_grid for t in range(spec.trials)]
    out = _map(_run_trial, args, threads)
    cells, i = [], 0
    errors = []
    for p in spec.p_grid:
        for n in spec.n_grid:
            chunk = out[i:i + spec.trials]
            i += spec.trials
            cells.append({
                "n": n,
                "p": p,
                "recovery_probability": sum(r[0] for r in chunk) / spec.trials,
                "trials": spec.trials,
                "mean_support_jaccard": float(np.mean([r[1] for r in chunk])),
                "failures": sum(r[2] for r in chunk),
            })
            errors += [f"n={n} p={p} trial={t}: {r[3]}" for t, r in enumerate(chunk) if r[2]]
    meta = {
        "code_version": __version__,
        "lambda_c": c,
        "lambda_c_calibrated": calibrated,
        "lambda_note": LAMBDA_NOTE if spec.lambda_policy == "theory" else "",
        "trial_failures": len(errors),
        "rng": "numpy Philox4x64; trial key = base_seed XOR blake2b64(('trial', n, p, trial))",
    }
    if errors:
        meta["first_failure"] = errors[0]
    return PhaseDiagramResult(cells, meta)


PHASE_COLUMNS = ("n", "p", "q", "k", "mode", "trials", "recovery_probability", "mean_support_jaccard")


def phase_rows(spec: PhaseDiagramSpec, result: PhaseDiagramResult):
    return [(c["n"], c["p"], spec.q, spec.k, spec.mode, c["trials"], c["recovery_probability"],
             c["mean_support_jaccard"]) for c in result.cells]


def smallest_sufficient_n(result: PhaseDiagramResult, p: int, level: float = 0.9) -> int | None:
    for c in sorted((c for c in result.cells if c["p"] == p), key=lambda c: c["n"]):
        if c["recovery_probability"] >= level:
            return c["n"]
    return None


@dataclass
class ScalingResult:
    rows: list  # dicts: n, mean_error, trials
    slope: float | None
    draws: list  # per-draw diagnostics
    metadata: dict = field(default_factory=dict)


def _sweep_trial(args):
    p, k, q, n, trial, base_seed, noise_sigma, coef_scale, c, oracle = args
    seed = stream_key(base_seed, "sweep", n, trial)
    draw = generate(SynthSpec(p=p, q=q, k=k, n=n, seed=seed, noise_sigma=noise_sigma, coef_scale=coef_scale))
    cohorts = partition_by_treatment(draw.data)
    cache = compute_moments(cohorts)
    if oracle:
        theta = fit_restricted(cache, draw.true_support)
    else:
        lam = theory_lambda(c, p, q, min(cohorts.sizes))
        res = select(cohorts, SelectionConfig(lambda_grid=(lam,), standardize=False))
        theta = res.theta_hat
    err = norm_infinf(theta - draw.true_theta)
    mu = draw.data.covariates.mean(axis=0)
    theta_or = fit_restricted(cache, draw.true_support)
    row = {"n": n, "trial": trial, "error": err,
           "recovered": int(SupportSet.from_theta(theta) == draw.true_support)}
    # plug-in ATE error against its norm bound, for the fit and for the oracle refit
    for tag, th in (("fit", theta), ("oracle", theta_or)):
        est = plugin_ate(th, mu, 1, 0)
        truth = plugin_ate(draw.true_theta, mu, 1, 0)
        row[f"ate_error_{tag}"] = abs(est - truth)
        row[f"ate_bound_{tag}"] = lemma_bound(th, draw.true_theta, mu, 1, 0)
    return row


def fitted_slope(ns, errs) -> float | None:
    if len(ns) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(errs, float)), 1)
    return float(slope)


def run_scaling_sweep(p: int, k: int, q: int, n_list, trials: int, base_seed: int = 0, noise_sigma: float = 1.0,
                      coef_scale: float = 1.0, c: float = DEFAULT_THEORY_C, oracle: bool = False,
                      threads: int | None = 1) -> ScalingResult:
    """Mean ``||theta_hat - theta*||_{inf,inf}`` per ``n`` and its log-log slope."""
    n_list = [int(v) for v in n_list]
    if n_list != sorted(n_list):
        raise ValueError("n_list must be ascending")
    if any(n < 4 * k for n in n_list):
        raise ValueError("every n must be at least 4k")
    args = [(p, k, q, n, t, base_seed, noise_sigma, coef_scale, c, oracle) for n in n_list for t in range(trials)]
    draws = _map(_sweep_trial, args, threads)
    rows = []
    for n in n_list:
        errs = [d["error"] for d in draws if d["n"] == n]
        rows.append({"n": n, "mean_error": float(np.mean(errs)), "trials": len(errs)})
    slope = fitted_slope([r["n"] for r in rows], [r["mean_error"] for r in rows]) \
        if all(r["mean_error"] > 0 for r in rows) else None
    violations = sum(d[f"ate_error_{tag}"] > d[f"ate_bound_{tag}"] for d in draws for tag in ("fit", "oracle"))
    meta = {"code_version": __version__, "lambda_c": c, "lambda_note": LAMBDA_NOTE,
            "bound_violations": violations}
    return ScalingResult(rows, slope, draws, meta)


def best_subset(cache, size: int) -> SupportSet:
    """Exhaustive search for the size-``size`` row set minimizing the restricted joint loss."""
    best, best_val = None, np.inf
    for S in combinations(range(cache.p), size):
        sup = SupportSet(S, cache.p)
        theta = fit_restricted(cache, sup)
        # at the restricted optimum the loss equals -1/2 sum_j gamma_S^T theta_S
        val = -0.5 * float(np.sum(cache.cross * theta))
        if best is None or val < best_val - 1e-14 * max(1.0, abs(best_val)):
            best, best_val = sup, val
    return best


def _subset_trial(args):
    p, q, k, n, trial, base_seed, noise_sigma, coef_scale, c = args
    seed = stream_key(base_seed, "subset", trial)
    draw = generate(SynthSpec(p=p, q=q, k=k, n=n, seed=seed, noise_sigma=noise_sigma, coef_scale=coef_scale))
    cohorts = partition_by_treatment(draw.data)
    lam = theory_lambda(c, p, q, min(cohorts.sizes))
    res = select(cohorts, SelectionConfig(lambda_grid=(lam,)))
    oracle = best_subset(compute_moments(cohorts), k)
    return {"trial": trial, "match": int(res.support == oracle), "fit_support": res.support.indices,
            "oracle_support": oracle.indices, "true_support": draw.true_support.indices}


def run_subset_oracle(p: int = 6, q: int = 2, k: int = 2, n: int = 2000, trials: int = 100, base_seed: int = 0,
                      noise_sigma: float = 0.5, coef_scale: float = 2.0, c: float = DEFAULT_THEORY_C,
                      threads: int | None = 1) -> list:
    args = [(p, q, k, n, t, base_seed, noise_sigma, coef_scale, c) for t in range(trials)]
    return _map(_subset_trial, args, threads)
