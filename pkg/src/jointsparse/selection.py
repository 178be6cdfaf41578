"""Covariate-set selection on top of the solver.

Modes
-----
joint
    one fit over the full ``p x q`` coefficient matrix with the penalty on
    row 2-norms; the support is the set of nonzero rows.
independent
    ``q`` single-column fits with the scalar penalty, followed by the union
    of the per-cohort supports.
treatment_regression
    baseline that keeps the covariates with the largest coefficients in a
    multinomial logistic regression of the treatment on the covariates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    CohortDataset,
    DataError,
    MomentCache,
    PooledDataset,
    canonical_order,
    compute_moments,
    moments_from_arrays,
    row_norms,
)
from .penalties import RegularizerSpec
from .solver import FitResult, SolverConfig, SupportSet, fit_moments, resolve_config
from .synth import make_rng

logger = logging.getLogger(__name__)

MODES = ("joint", "independent", "treatment_regression")


class SelectionError(RuntimeError):
    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []


@dataclass(frozen=True)
class SelectionConfig:
    """``lambda_grid=None`` builds the default log-spaced grid from the data;
    ``cv_folds=None`` fits at the first grid value only."""

    mode: str = "joint"
    lambda_grid: tuple | None = None
    cv_folds: int | None = None
    reg_kind: str = "MCP"
    gamma: float | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    standardize: bool = True
    n_lambda: int = 30
    lambda_min_ratio: float = 0.01
    seed: int = 0
    top_m: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if not grid:
                raise ValueError("empty lambda grid")
            if any(v <= 0 for v in grid) or any(a <= b for a, b in zip(grid, grid[1:])):
                raise ValueError("lambda grid must be positive and strictly decreasing")
            object.__setattr__(self, "lambda_grid", grid)
        if self.cv_folds is not None and self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")

    def regularizer(self, lam: float) -> RegularizerSpec:
        return RegularizerSpec(self.reg_kind, lam, self.gamma)


@dataclass
class SelectionResult:
    support: SupportSet
    chosen_lambda: float
    cv_table: list = field(default_factory=list)
    per_mode_detail: list = field(default_factory=list)
    path_supports: list = field(default_factory=list)
    fit: FitResult | list | None = None
    converged: bool = True
    theta_hat: np.ndarray | None = None


@dataclass(frozen=True)
class Standardization:
    means: np.ndarray  # (q, p) per-cohort covariate means
    y_means: np.ndarray  # (q,)
    scale: np.ndarray  # (p,) pooled standard deviation

    def to_original(self, theta: np.ndarray) -> np.ndarray:
        return theta / self.scale[:, None]


def canonicalize(data: CohortDataset) -> CohortDataset:
    """Sort the rows of each cohort into canonical order."""
    out = []
    for c in data.cohorts:
        o = canonical_order(c.design, c.outcome)
        out.append((c.design[o], c.outcome[o]))
    return CohortDataset(out)


def standardize(data: CohortDataset) -> tuple[CohortDataset, Standardization]:
    """Center covariates and outcome per cohort; scale covariates to pooled unit variance."""
    means = np.stack([c.design.mean(axis=0) for c in data.cohorts])
    y_means = np.array([c.outcome.mean() for c in data.cohorts])
    centered = [c.design - means[j] for j, c in enumerate(data.cohorts)]
    n = sum(data.sizes)
    scale = np.sqrt(sum((Xc ** 2).sum(axis=0) for Xc in centered) / n)
    scale = np.where(scale > 0, scale, 1.0)
    out = CohortDataset([(Xc / scale, c.outcome - y_means[j])
                         for j, (Xc, c) in enumerate(zip(centered, data.cohorts))])
    return out, Standardization(means, y_means, scale)


def lambda_max(cache: MomentCache, prox_scaling: str = "step", step: float | None = None) -> float:
    """Smallest lambda for which the first proximal step from zero kills every row."""
    lm = float(row_norms(cache.cross).max())
    if prox_scaling == "paper_literal":
        lm *= step if step is not None else 1.0
    return lm


def default_grid(cache: MomentCache, n_lambda: int = 30, ratio: float = 0.01, prox_scaling: str = "step",
                 step: float | None = None) -> tuple:
    top = lambda_max(cache, prox_scaling, step)
    if top <= 0:
        top = 1.0
    return tuple(np.geomspace(top, top * ratio, n_lambda).tolist())


def column_cache(cache: MomentCache, j: int) -> MomentCache:
    return moments_from_arrays(cache.gram[j:j + 1], cache.cross[:, j:j + 1],
                               cache.sizes[j:j + 1] if cache.sizes else ())


def fit_path(cache: MomentCache, config: SelectionConfig, grid, solver: SolverConfig | None = None):
    """Warm-started fits down ``grid``; in independent mode each entry is a list of column fits."""
    solver = solver or config.solver
    if config.mode == "joint":
        solver = resolve_config(cache, solver)
        theta, out = None, []
        for lam in grid:
            res = fit_moments(cache, config.regularizer(lam), replace(solver, theta_init=theta))
            theta = res.theta_hat
            out.append(res)
        return out
    columns = [column_cache(cache, j) for j in range(cache.q)]
    col_solvers = [resolve_config(c, solver) for c in columns]
    thetas = [None] * cache.q
    out = []
    for lam in grid:
        row = []
        for j, (c, s) in enumerate(zip(columns, col_solvers)):
            res = fit_moments(c, config.regularizer(lam), replace(s, theta_init=thetas[j]))
            thetas[j] = res.theta_hat
            row.append(res)
        out.append(row)
    return out


def _theta_of(entry) -> np.ndarray:
    if isinstance(entry, FitResult):
        return entry.theta_hat
    return np.hstack([r.theta_hat for r in entry])


def _converged(entry) -> bool:
    if isinstance(entry, FitResult):
        return entry.converged
    return all(r.converged for r in entry)


def fold_assignment(data: CohortDataset, folds: int, seed: int) -> list:
    """Per-cohort fold ids (rows in canonical order), stratified by cohort."""
    ids = []
    for j, c in enumerate(data.cohorts):
        if c.n < folds:
            raise DataError(f"cohort {j} has {c.n} rows, fewer than {folds} folds")
        perm = make_rng(seed, "cv-folds", j).permutation(c.n)
        f = np.empty(c.n, dtype=int)
        f[perm] = np.arange(c.n) % folds
        ids.append(f)
    return ids


def cross_validate(data: CohortDataset, config: SelectionConfig, grid=None):
    """K-fold prediction-error CV over the lambda grid.

    Returns ``(chosen_lambda, cv_table)`` where ``cv_table`` lists
    ``(lambda, mean held-out score)``; the score sums the per-cohort mean
    squared prediction errors.  Ties go to the larger lambda.
    """
    if not config.cv_folds or config.cv_folds < 2:
        raise ValueError("cross validation needs cv_folds >= 2")
    grid = tuple(grid if grid is not None else config.lambda_grid)
    K = config.cv_folds
    ids = fold_assignment(data, K, config.seed)
    scores = np.zeros((K, len(grid)))
    for k in range(K):
        train, test = [], []
        for c, f in zip(data.cohorts, ids):
            tr, te = f != k, f == k
            if not tr.any() or not te.any():
                raise DataError(f"fold {k} leaves a cohort empty")
            train.append((c.design[tr], c.outcome[tr]))
            test.append((c.design[te], c.outcome[te]))
        cache = compute_moments(CohortDataset(train))
        path = fit_path(cache, config, grid)
        for g, entry in enumerate(path):
            theta = _theta_of(entry)
            scores[k, g] = sum(np.mean((y - X @ theta[:, j]) ** 2) for j, (X, y) in enumerate(test))
    mean = scores.mean(axis=0)
    best = float(mean.min())
    # first index within rounding of the minimum = largest such lambda
    g_best = int(np.flatnonzero(mean <= best + 1e-12 * max(1.0, abs(best)))[0])
    return grid[g_best], [(lam, float(s)) for lam, s in zip(grid, mean)]


def select(data: CohortDataset, config: SelectionConfig | None = None) -> SelectionResult:
    config = config or SelectionConfig()
    if config.mode == "treatment_regression":
        raise ValueError("treatment_regression mode works on pooled data; use select_by_treatment_regression")
    data = canonicalize(data)
    std = None
    if config.standardize:
        data, std = standardize(data)
    cache = compute_moments(data)
    grid = config.lambda_grid
    if grid is None:
        grid = default_grid(cache, config.n_lambda, config.lambda_min_ratio, config.solver.prox_scaling,
                            resolve_config(cache, config.solver).step_init)
    if config.cv_folds:
        chosen, table = cross_validate(data, config, grid)
    else:
        chosen, table = grid[0], []
    upto = grid[: grid.index(chosen) + 1]
    path = fit_path(cache, config, upto)
    if not any(_converged(e) for e in path):
        traces = [e.objective_trace if isinstance(e, FitResult) else [r.objective_trace for r in e] for e in path]
        raise SelectionError("solver failed to converge at every lambda", traces)
    final = path[-1]
    if not _converged(final):
        logger.warning("solver did not converge at the chosen lambda %.4g", chosen)
    supports = [SupportSet.from_theta(_theta_of(e)) for e in path]
    detail = []
    if config.mode == "independent":
        detail = [r.support for r in final]
        support = SupportSet((), cache.p)
        for s in detail:
            support = support.union(s)
    else:
        support = final.support
    theta = _theta_of(final)
    return SelectionResult(
        support=support,
        chosen_lambda=float(chosen),
        cv_table=table,
        per_mode_detail=detail,
        path_supports=supports,
        fit=final,
        converged=_converged(final),
        theta_hat=std.to_original(theta) if std is not None else theta,
    )


def select_by_treatment_regression(data: PooledDataset, top_m: int, ridge: float = 1.0) -> SupportSet:
    """Keep the ``top_m`` covariates with the largest absolute multinomial-logit
    coefficient (over classes) when regressing treatment on standardized covariates."""
    from .effects import fit_multinomial_logit

    if not 1 <= top_m <= data.p:
        raise ValueError(f"top_m must lie in 1..{data.p}")
    if top_m == data.p:
        return SupportSet(tuple(range(data.p)), data.p)
    X = data.covariates
    sd = X.std(axis=0)
    Xs = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    B, _, _, _ = fit_multinomial_logit(Xs, data.treatment, data.q, ridge)
    strength = np.abs(B).max(axis=1)
    order = np.argsort(-strength, kind="stable")
    return SupportSet(tuple(order[:top_m]), data.p)
