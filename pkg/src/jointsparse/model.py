"""Cohort-partitioned data, second-moment statistics and the joint least-squares loss.

Coefficient matrices are plain ``(p, q)`` float arrays: row ``i`` holds the
coefficients of covariate ``i`` across the ``q`` treatments.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Invalid or inconsistent input data."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Cohort:
    design: np.ndarray
    outcome: np.ndarray

    @property
    def n(self) -> int:
        return self.design.shape[0]


@dataclass(frozen=True)
class CohortDataset:
    """Per-treatment design matrices ``X_j`` and outcome vectors ``y_j``."""

    cohorts: tuple

    def __init__(self, cohorts: Sequence):
        built = []
        for j, c in enumerate(cohorts):
            if isinstance(c, Cohort):
                X, y = c.design, c.outcome
            else:
                X, y = c
            X = _frozen(X)
            y = _frozen(y)
            if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
                raise DataError(f"cohort {j}: design {X.shape} and outcome {y.shape} do not align")
            if X.shape[0] < 1:
                raise DataError(f"cohort {j} is empty")
            if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
                raise DataError(f"cohort {j} contains non-finite values")
            built.append(Cohort(X, y))
        if len(built) < 2:
            raise DataError(f"need at least 2 treatment cohorts, got {len(built)}")
        p = built[0].design.shape[1]
        if p < 1:
            raise DataError("need at least one covariate")
        for j, c in enumerate(built):
            if c.design.shape[1] != p:
                raise DataError(f"cohort {j} has {c.design.shape[1]} covariates, expected {p}")
        object.__setattr__(self, "cohorts", tuple(built))

    @property
    def p(self) -> int:
        return self.cohorts[0].design.shape[1]

    @property
    def q(self) -> int:
        return len(self.cohorts)

    @property
    def sizes(self) -> list[int]:
        return [c.n for c in self.cohorts]


@dataclass(frozen=True)
class PooledDataset:
    """Observational data before the split by treatment.

    ``treatment`` holds integer labels in ``0..q-1``; every label must occur.
    ``columns`` optionally names the covariates and ``labels`` the original
    treatment values (``labels[j]`` is the raw value mapped to ``j``).
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    q: int | None = None
    columns: tuple | None = None
    labels: tuple | None = None

    def __post_init__(self):
        X = _frozen(self.covariates)
        y = _frozen(self.outcome)
        t = np.asarray(self.treatment)
        if t.size and not np.all(np.equal(np.mod(t, 1), 0)):
            raise DataError("treatment labels must be integers")
        t = _frozen(t, dtype=np.int64)
        if X.ndim != 2:
            raise DataError(f"covariates must be 2-d, got shape {X.shape}")
        if not (X.shape[0] == t.shape[0] == y.shape[0]):
            raise DataError("covariates, treatment and outcome lengths differ")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("non-finite covariate or outcome values")
        q = int(t.max()) + 1 if self.q is None else int(self.q)
        if t.size and (t.min() < 0 or t.max() >= q):
            raise DataError(f"treatment labels must lie in 0..{q - 1}")
        if self.columns is not None and len(self.columns) != X.shape[1]:
            raise DataError("column names do not match covariate count")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", t)
        object.__setattr__(self, "q", q)
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(self.columns))
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def subset(self, rows) -> "PooledDataset":
        rows = np.asarray(rows)
        return PooledDataset(self.covariates[rows], self.treatment[rows], self.outcome[rows],
                             q=self.q, columns=self.columns, labels=self.labels)

    def column_names(self) -> list[str]:
        if self.columns is not None:
            return list(self.columns)
        return [f"x{i}" for i in range(self.p)]


def partition_by_treatment(data: PooledDataset) -> CohortDataset:
    """Split pooled rows into one cohort per treatment label, preserving row order."""
    cohorts = []
    for j in range(data.q):
        mask = data.treatment == j
        if not mask.any():
            raise DataError(f"treatment label {j} absent")
        cohorts.append((data.covariates[mask], data.outcome[mask]))
    return CohortDataset(cohorts)


@dataclass(frozen=True)
class MomentCache:
    """Per-cohort ``X^T X / n_j`` (``gram``, shape ``(q, p, p)``) and
    ``X^T y / n_j`` (``cross``, shape ``(p, q)``)."""

    gram: np.ndarray
    cross: np.ndarray
    sizes: tuple = field(default=())

    @property
    def p(self) -> int:
        return self.cross.shape[0]

    @property
    def q(self) -> int:
        return self.cross.shape[1]


def canonical_order(X: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Row order sorted lexicographically on ``(X, y)``.

    Reducing over rows in this order makes floating-point sums independent of
    the order the rows arrived in.
    """
    keys = X if y is None else np.column_stack([X, y])
    return np.lexsort(keys.T[::-1])


def compute_moments(data: CohortDataset) -> MomentCache:
    grams, cross = [], []
    for c in data.cohorts:
        order = canonical_order(c.design, c.outcome)
        X, y = c.design[order], c.outcome[order]
        G = X.T @ X / c.n
        # symmetrise away BLAS rounding asymmetry
        grams.append(0.5 * (G + G.T))
        cross.append(X.T @ y / c.n)
    return MomentCache(_frozen(np.stack(grams)), _frozen(np.stack(cross, axis=1)),
                       tuple(data.sizes))


def moments_from_arrays(gram, cross, sizes=()) -> MomentCache:
    """Build a cache directly from precomputed moments (any ``q >= 1``)."""
    gram = np.asarray(gram, dtype=np.float64)
    cross = np.asarray(cross, dtype=np.float64)
    if cross.ndim == 1:
        cross = cross[:, None]
    if gram.ndim == 2:
        gram = gram[None]
    if gram.shape != (cross.shape[1], cross.shape[0], cross.shape[0]):
        raise DataError(f"gram shape {gram.shape} inconsistent with cross shape {cross.shape}")
    return MomentCache(_frozen(gram), _frozen(cross), tuple(sizes))


def _check_theta(theta, cache: MomentCache) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (cache.p, cache.q):
        raise DataError(f"theta has shape {theta.shape}, expected {(cache.p, cache.q)}")
    return theta


def gram_times(theta: np.ndarray, cache: MomentCache) -> np.ndarray:
    """Column ``j`` of the result is ``gram[j] @ theta[:, j]``."""
    return np.matmul(cache.gram, theta.T[:, :, None])[:, :, 0].T


def loss(theta, cache: MomentCache) -> float:
    theta = _check_theta(theta, cache)
    Gt = gram_times(theta, cache)
    return float(np.sum(0.5 * theta * Gt - cache.cross * theta))


def grad_loss(theta, cache: MomentCache) -> np.ndarray:
    theta = _check_theta(theta, cache)
    return gram_times(theta, cache) - cache.cross


def row_norms(theta) -> np.ndarray:
    return np.sqrt(np.sum(np.square(theta), axis=1))


def norm_12(theta) -> float:
    """Sum of row 2-norms."""
    return float(np.sum(row_norms(theta)))


def norm_inf2(theta) -> float:
    """Largest row 2-norm."""
    r = row_norms(theta)
    return float(r.max()) if r.size else 0.0


def norm_infinf(theta) -> float:
    theta = np.asarray(theta)
    return float(np.max(np.abs(theta))) if theta.size else 0.0


def shift_correction(theta: np.ndarray, reg) -> np.ndarray:
    """Rows ``theta_i * q'(|theta_i|) / |theta_i|``; zero rows stay zero."""
    r = row_norms(theta)
    out = np.zeros_like(theta)
    nz = r > 0
    if nz.any():
        scale = reg.q_prime(r[nz]) / r[nz]
        out[nz] = theta[nz] * scale[:, None]
    return out


def grad_shifted_loss(theta, cache: MomentCache, reg) -> np.ndarray:
    """Gradient of the loss minus the smooth shift ``sum_i q(|theta_i|)``."""
    if reg.kind == "L1":
        raise ValueError("shifted gradient is degenerate for the L1 kind; use grad_loss")
    theta = _check_theta(theta, cache)
    return grad_loss(theta, cache) - shift_correction(theta, reg)
