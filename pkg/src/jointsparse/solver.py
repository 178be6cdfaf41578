"""Proximal gradient descent for row-sparse penalized least squares.

The smooth part of each step is the loss minus the penalty shift
``sum_i q(|theta_i|)``; the nonsmooth part ``lam * ||theta||_{1,2}`` is
handled by group soft-thresholding of the rows.  Iterates are kept strictly
inside the ball ``||theta||_{1,2} < R``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .model import (
    CohortDataset,
    DataError,
    MomentCache,
    compute_moments,
    gram_times,
    norm_12,
    row_norms,
    shift_correction,
)
from .penalties import RegularizerSpec, rho

logger = logging.getLogger(__name__)

MAX_BACKTRACKS = 60


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SupportSet:
    indices: tuple
    p: int

    def __post_init__(self):
        idx = tuple(sorted(int(i) for i in self.indices))
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate support indices")
        if idx and (idx[0] < 0 or idx[-1] >= self.p):
            raise ValueError(f"support indices must lie in 0..{self.p - 1}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_theta(cls, theta) -> "SupportSet":
        theta = np.asarray(theta)
        return cls(tuple(np.flatnonzero(np.any(theta != 0, axis=1))), theta.shape[0])

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, i):
        return i in self.indices

    def mask(self) -> np.ndarray:
        m = np.zeros(self.p, dtype=bool)
        m[list(self.indices)] = True
        return m

    def union(self, other: "SupportSet") -> "SupportSet":
        return SupportSet(tuple(set(self.indices) | set(other.indices)), self.p)

    def jaccard(self, other: "SupportSet") -> float:
        a, b = set(self.indices), set(other.indices)
        if not a and not b:
            return 1.0
        return len(a & b) / len(a | b)


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs; ``None`` fields are resolved from the data by :func:`resolve_config`.

    ``prox_scaling="step"`` thresholds by ``step * lam`` (fixed points are
    stationary points); ``"paper_literal"`` thresholds by ``lam`` at every step.
    ``descent_guard=False`` accepts the first feasible step without requiring
    the objective to decrease, as in the printed line search.
    """

    radius_R: float | None = None
    step_init: float | None = None
    backtrack_c: float = 0.5
    max_iters: int = 5000
    tol: float = 1e-7
    theta_init: np.ndarray | None = None
    prox_scaling: str = "step"
    descent_guard: bool = True

    def __post_init__(self):
        if not 0 < self.backtrack_c < 1:
            raise ValueError("backtrack_c must lie strictly inside (0, 1)")
        if self.radius_R is not None and not (np.isfinite(self.radius_R) and self.radius_R > 0):
            raise ValueError("radius_R must be finite and positive")
        if self.step_init is not None and not self.step_init > 0:
            raise ValueError("step_init must be positive")
        if self.max_iters < 1 or self.tol <= 0:
            raise ValueError("max_iters and tol must be positive")
        if self.prox_scaling not in ("step", "paper_literal"):
            raise ValueError(f"unknown prox_scaling {self.prox_scaling!r}")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    support: SupportSet
    iterations: int
    final_objective: float
    converged: bool
    objective_trace: list = field(default_factory=list)
    step: float = float("nan")
    message: str = ""


def prox_l12(theta, threshold: float) -> np.ndarray:
    """Group soft-thresholding of the rows of ``theta``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    theta = np.asarray(theta, dtype=np.float64)
    r = row_norms(theta)
    scale = np.zeros_like(r)
    nz = r > threshold
    scale[nz] = 1.0 - threshold / r[nz]
    return theta * scale[:, None]


def penalty_value(theta, reg: RegularizerSpec) -> float:
    return float(np.sum(rho(row_norms(theta), reg)))


def objective(theta, cache: MomentCache, reg: RegularizerSpec, config: SolverConfig | None = None) -> float:
    """Loss plus ``sum_i rho(|theta_i|)``.

    ``config`` is accepted for interface symmetry; the constraint is enforced
    by :func:`fit`, not reflected here.
    """
    theta = np.asarray(theta, dtype=np.float64)
    Gt = gram_times(theta, cache)
    return float(np.sum(0.5 * theta * Gt - cache.cross * theta)) + penalty_value(theta, reg)


def power_max_eig(cache: MomentCache, iters: int = 20) -> float:
    """Largest eigenvalue over the cohort Gram matrices by power iteration."""
    p = cache.p
    v0 = 1.0 + np.linspace(0.0, 1.0, p) ** 2
    best = 0.0
    for G in cache.gram:
        v = v0 / np.linalg.norm(v0)
        est = 0.0
        for _ in range(iters):
            w = G @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            est = float(v @ w)
            v = w / nw
        best = max(best, est)
    return best


def ridge_pilot(cache: MomentCache, ridge: float = 1e-3) -> np.ndarray:
    p = cache.p
    out = np.empty((p, cache.q))
    for j, G in enumerate(cache.gram):
        scale = max(float(np.trace(G)) / p, 1e-12)
        out[:, j] = np.linalg.solve(G + ridge * scale * np.eye(p), cache.cross[:, j])
    return out


def default_radius(cache: MomentCache) -> float:
    r = 2.0 * norm_12(ridge_pilot(cache))
    return r if np.isfinite(r) and r > 0 else 1.0


def resolve_config(cache: MomentCache, config: SolverConfig | None = None) -> SolverConfig:
    config = config or SolverConfig()
    updates = {}
    if config.step_init is None:
        L = power_max_eig(cache)
        updates["step_init"] = 1.0 / L if L > 0 else 1.0
    if config.radius_R is None:
        updates["radius_R"] = default_radius(cache)
    return replace(config, **updates) if updates else config


def fit_moments(cache: MomentCache, reg: RegularizerSpec, config: SolverConfig | None = None) -> FitResult:
    """Run the solver on precomputed moments (any number of columns ``q >= 1``)."""
    config = resolve_config(cache, config)
    R, lam = config.radius_R, reg.lam
    p, q = cache.p, cache.q
    if config.theta_init is None:
        theta = np.zeros((p, q))
    else:
        theta = np.array(config.theta_init, dtype=np.float64)
        if theta.shape != (p, q):
            raise DataError(f"theta_init has shape {theta.shape}, expected {(p, q)}")
        if not norm_12(theta) < R:
            raise ValueError("theta_init lies outside the constraint ball")
    shifted = reg.kind != "L1"
    cross = cache.cross
    literal = config.prox_scaling != "step"

    def state(th):
        # one pass gives the product, row norms and objective reused by the next step
        G_t = gram_times(th, cache)
        rn = np.sqrt(np.einsum("ij,ij->i", th, th))
        val = float(np.einsum("ij,ij->", th, 0.5 * G_t - cross)) + float(np.sum(rho(rn, reg)))
        return G_t, rn, val

    Gt, rn, obj = state(theta)
    trace = [obj]
    converged = False
    message = "max_iters reached"
    step = config.step_init
    it = 0
    for it in range(1, config.max_iters + 1):
        grad = Gt - cross
        if shifted:
            nz = rn > 0
            if nz.any():
                corr = np.zeros_like(theta)
                corr[nz] = theta[nz] * (reg.q_prime(rn[nz]) / rn[nz])[:, None]
                grad -= corr
        ref = config.tol * max(1.0, float(np.sqrt(np.einsum("ij,ij->", theta, theta))))
        accepted = None
        small_move = False
        step = config.step_init
        for _ in range(MAX_BACKTRACKS + 1):
            thr = lam if literal else step * lam
            z = theta - step * grad
            zn = np.sqrt(np.einsum("ij,ij->i", z, z))
            keep = zn > thr
            scale = np.zeros_like(zn)
            scale[keep] = 1.0 - thr / zn[keep]
            cand = z * scale[:, None]
            c_rn = np.sqrt(np.einsum("ij,ij->i", cand, cand))
            if float(np.sum(c_rn)) < R:
                G_c = gram_times(cand, cache)
                obj_c = float(np.einsum("ij,ij->", cand, 0.5 * G_c - cross)) + float(np.sum(rho(c_rn, reg)))
                if not np.isfinite(obj_c):
                    raise SolverError(f"non-finite objective at iteration {it}")
                if obj_c <= obj or not config.descent_guard:
                    accepted = (cand, G_c, c_rn, obj_c)
                    break
                if np.linalg.norm(cand - theta) <= ref:
                    # no representable descent left at this resolution
                    small_move = True
                    break
            step *= config.backtrack_c
        if accepted is None:
            if small_move:
                converged, message = True, "converged (objective flat within rounding)"
            else:
                message = f"line search exhausted {MAX_BACKTRACKS} backtracks at iteration {it}"
                logger.warning(message)
            break
        cand, G_c, c_rn, obj_c = accepted
        if np.any(~np.isfinite(cand)):
            raise SolverError(f"NaN in iterate at iteration {it}")
        delta = float(np.linalg.norm(cand - theta))
        theta, Gt, rn, obj = cand, G_c, c_rn, obj_c
        trace.append(obj)
        if delta <= ref:
            converged, message = True, "converged"
            break
    return FitResult(
        theta_hat=theta,
        support=SupportSet.from_theta(theta),
        iterations=it,
        final_objective=obj,
        converged=converged,
        objective_trace=trace,
        step=step,
        message=message,
    )


def fit(data: CohortDataset | MomentCache, reg: RegularizerSpec, config: SolverConfig | None = None) -> FitResult:
    cache = data if isinstance(data, MomentCache) else compute_moments(data)
    return fit_moments(cache, reg, config)


def fit_restricted(data: CohortDataset | MomentCache, support: SupportSet) -> np.ndarray:
    """Per-cohort least squares on the covariates in ``support``; other rows are zero."""
    cache = data if isinstance(data, MomentCache) else compute_moments(data)
    theta = np.zeros((cache.p, cache.q))
    idx = np.asarray(support.indices, dtype=int)
    if idx.size == 0:
        return theta
    for j in range(cache.q):
        G = cache.gram[j][np.ix_(idx, idx)]
        g = cache.cross[idx, j]
        if np.linalg.matrix_rank(G) < idx.size:
            raise SolverError(f"restricted Gram matrix of cohort {j} is singular")
        theta[idx, j] = np.linalg.solve(G, g)
    return theta


def is_stationary(theta, cache: MomentCache, reg: RegularizerSpec, step: float, tol: float = 1e-6) -> bool:
    """Whether ``theta`` is a fixed point of one proximal gradient step."""
    grad = gram_times(theta, cache) - cache.cross
    if reg.kind != "L1":
        grad = grad - shift_correction(theta, reg)
    nxt = prox_l12(theta - step * grad, step * reg.lam)
    return float(np.linalg.norm(nxt - theta)) <= tol * max(1.0, float(np.linalg.norm(theta)))
