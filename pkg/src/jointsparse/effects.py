"""Treatment-effect estimation on a selected covariate set.

Two estimators are provided: the linear plug-in contrast of fitted
coefficient columns and the augmented inverse-propensity-weighted (AIPW,
doubly robust) estimator built from a restricted linear outcome model and a
multinomial logistic propensity model.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .model import DataError, PooledDataset, partition_by_treatment
from .solver import SolverError, SupportSet, fit_restricted
from .synth import make_rng

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


def _check_pair(q: int, t: int, t_prime: int):
    for v in (t, t_prime):
        if not 0 <= v < q:
            raise IndexError(f"treatment {v} out of range 0..{q - 1}")


def _restrict(theta_hat, support):
    theta_hat = np.asarray(theta_hat, dtype=np.float64)
    if support is None:
        return theta_hat
    return theta_hat[list(SupportSet(tuple(support), theta_hat.shape[0]).indices)]


def plugin_ite(theta_hat, s, t: int, t_prime: int, support=None) -> float:
    """``(theta[:, t] - theta[:, t'])^T s``.

    ``s`` has one entry per row of ``theta_hat``, or one per index in
    ``support`` when that is given.
    """
    th = _restrict(theta_hat, support)
    _check_pair(th.shape[1], t, t_prime)
    if t == t_prime:
        return 0.0
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (th.shape[0],):
        raise DataError(f"covariate vector has length {s.size}, expected {th.shape[0]}")
    return float((th[:, t] - th[:, t_prime]) @ s)


def plugin_ate(theta_hat, mu_S, t: int, t_prime: int, support=None) -> float:
    return plugin_ite(theta_hat, mu_S, t, t_prime, support)


def lemma_bound(theta_hat, theta_true, mean, t: int, t_prime: int) -> float:
    """Norm bound on the plug-in ATE error, taken over the union of supports."""
    theta_hat = np.asarray(theta_hat)
    theta_true = np.asarray(theta_true)
    rows = np.any(theta_hat != 0, axis=1) | np.any(theta_true != 0, axis=1)
    diff = theta_hat - theta_true
    cols = (t,) if t == t_prime else (t, t_prime)
    return float(np.abs(np.asarray(mean)[rows]).sum() * sum(np.abs(diff[:, c]).max() for c in cols))


@dataclass(frozen=True)
class PropensityModel:
    """Multinomial logistic scores on ``columns``; class 0 is the reference."""

    coefficients: np.ndarray
    intercepts: np.ndarray
    columns: tuple
    clip_bounds: tuple = (0.01, 0.99)
    iterations: int = 0
    grad_norm: float = 0.0

    def __post_init__(self):
        lo, hi = self.clip_bounds
        if not 0 < lo < hi < 1:
            raise ValueError("clip bounds must satisfy 0 < low < high < 1")

    @property
    def q(self) -> int:
        return self.intercepts.shape[0]

    def scores(self, X) -> np.ndarray:
        Xs = np.asarray(X, dtype=np.float64)[:, list(self.columns)]
        return Xs @ self.coefficients + self.intercepts

    def predict_proba(self, X) -> np.ndarray:
        z = self.scores(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def clipped_proba(self, X) -> np.ndarray:
        return np.clip(self.predict_proba(X), *self.clip_bounds)

    @classmethod
    def constant(cls, probs, columns=(), clip_bounds=(0.01, 0.99)) -> "PropensityModel":
        probs = np.asarray(probs, dtype=np.float64)
        b = np.log(probs) - np.log(probs[0])
        return cls(np.zeros((len(columns), probs.size)), b, tuple(columns), clip_bounds)

    @classmethod
    def from_scores(cls, weights, columns, clip_bounds=(0.01, 0.99)) -> "PropensityModel":
        """Model with ``softmax(x_S^T weights)`` probabilities (no intercept)."""
        W = np.asarray(weights, dtype=np.float64)
        W = W - W[:, :1]
        return cls(W, np.zeros(W.shape[1]), tuple(columns), clip_bounds)


def _softmax_ref(Z, W):
    """Class probabilities with the reference class score fixed at zero."""
    S = np.zeros((Z.shape[0], W.shape[1] + 1))
    S[:, 1:] = Z @ W
    S -= S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=1, keepdims=True)


def fit_multinomial_logit(X, t, q: int, ridge: float = 1.0, tol: float = 1e-6, max_iter: int = 10_000,
                          max_coef: float = 1e4):
    """Ridge-penalized multinomial logit by damped Newton iterations.

    Minimizes the mean negative log-likelihood plus ``ridge/(2n) ||B||^2``
    (intercepts unpenalized).  Returns ``(B, b, iterations, grad_norm)`` with
    the reference class column omitted.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    Y = np.zeros((n, q))
    Y[np.arange(n), t] = 1.0
    Y = Y[:, 1:]
    m = q - 1
    pen = np.full(d + 1, ridge / n)
    pen[0] = 0.0
    # start at the intercept-only optimum
    freq = np.clip(np.bincount(t, minlength=q) / n, 1e-12, None)
    W = np.zeros((d + 1, m))
    W[0] = np.log(freq[1:]) - np.log(freq[0])

    def obj(W):
        P = _softmax_ref(Z, W)
        return -np.mean(np.log(np.clip(P[np.arange(n), t], 1e-300, None))) + 0.5 * np.sum(pen[:, None] * W * W)

    f = obj(W)
    gnorm = np.inf
    for it in range(1, max_iter + 1):
        P = _softmax_ref(Z, W)[:, 1:]
        G = Z.T @ (P - Y) / n + pen[:, None] * W
        gnorm = float(np.linalg.norm(G))
        if gnorm <= tol:
            break
        # Hessian blocks: Z^T diag(P_k (delta_kl - P_l)) Z / n
        Wk = P[:, :, None] * (np.eye(m)[None] - P[:, None, :])
        H = np.einsum("ia,ikl,ib->akbl", Z, Wk, Z) / n
        H = H.reshape((d + 1) * m, (d + 1) * m)
        H[np.diag_indices_from(H)] += np.repeat(pen, m) + 1e-12
        try:
            step = np.linalg.solve(H, G.reshape(-1)).reshape(d + 1, m)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Hessian at iteration {it} (gradient norm {gnorm:.3g})") from exc
        a = 1.0
        while a > 1e-10:
            W_new = W - a * step
            f_new = obj(W_new)
            if f_new <= f - 1e-4 * a * float(np.sum(G * step)):
                break
            a *= 0.5
        else:
            # no further decrease is representable
            W_new, f_new = W, f
        if not np.all(np.isfinite(W_new)) or np.abs(W_new).max() > max_coef:
            raise ConvergenceError(
                f"coefficients diverging at iteration {it} (gradient norm {gnorm:.3g}); "
                "the classes look separable, increase the ridge penalty")
        if f_new == f and a <= 1e-10:
            break
        W, f = W_new, f_new
    if gnorm > tol:
        P = _softmax_ref(Z, W)[:, 1:]
        gnorm = float(np.linalg.norm(Z.T @ (P - Y) / n + pen[:, None] * W))
    if gnorm > tol:
        raise ConvergenceError(f"propensity fit did not converge: gradient norm {gnorm:.3g} after {it} iterations")
    return W[1:], W[0], it, gnorm


def fit_propensity(data: PooledDataset, support: SupportSet, ridge: float = 1.0,
                   clip_bounds=(0.01, 0.99), tol: float = 1e-6, max_iter: int = 10_000) -> PropensityModel:
    counts = np.bincount(data.treatment, minlength=data.q)
    if np.any(counts == 0):
        raise DataError(f"treatment class {int(np.flatnonzero(counts == 0)[0])} absent")
    cols = tuple(support.indices) if isinstance(support, SupportSet) else tuple(support)
    X = data.covariates[:, list(cols)]
    B, b, it, g = fit_multinomial_logit(X, data.treatment, data.q, ridge, tol, max_iter)
    coef = np.zeros((len(cols), data.q))
    coef[:, 1:] = B
    icpt = np.zeros(data.q)
    icpt[1:] = b
    return PropensityModel(coef, icpt, cols, tuple(clip_bounds), it, g)


@dataclass(frozen=True)
class OutcomeModel:
    """Per-treatment linear predictors ``intercepts[t] + coef[:, t]^T x``."""

    coef: np.ndarray
    intercepts: np.ndarray
    columns: tuple | None = None

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.columns is None:
            return X @ self.coef + self.intercepts
        cols = list(self.columns)
        return X[:, cols] @ self.coef[cols] + self.intercepts


def fit_outcome_models(data: PooledDataset, support: SupportSet, intercept: bool = True) -> OutcomeModel:
    """Restricted per-cohort least squares on ``support``, optionally with intercepts."""
    idx = list(support.indices)
    k = len(idx)
    # only the support columns enter the fit, so other columns cannot even reorder sums
    XS = data.covariates[:, idx]
    if intercept:
        XS = np.hstack([np.ones((data.n, 1)), XS])
    cohorts = partition_by_treatment(PooledDataset(XS, data.treatment, data.outcome, q=data.q))
    theta = fit_restricted(cohorts, SupportSet(tuple(range(XS.shape[1])), XS.shape[1]))
    coef = np.zeros((data.p, data.q))
    coef[idx] = theta[-k:] if k else 0.0
    return OutcomeModel(coef, theta[0] if intercept else np.zeros(data.q), tuple(idx))


def dr_potential_outcomes(data: PooledDataset, outcome: OutcomeModel, prop: PropensityModel):
    """Per-sample AIPW pseudo-outcomes (shape ``(n, q)``) and the clipped fraction."""
    m = outcome.predict(data.covariates)
    raw = prop.predict_proba(data.covariates)
    e = np.clip(raw, *prop.clip_bounds)
    clipped = float(np.mean(np.any(raw != e, axis=1)))
    ind = np.zeros_like(m)
    ind[np.arange(data.n), data.treatment] = 1.0
    psi = m + ind * (data.outcome[:, None] - m) / e
    if not np.all(np.isfinite(psi)):
        raise ValueError("non-finite doubly robust pseudo-outcomes")
    return psi, clipped


def dr_effect(data: PooledDataset, support: SupportSet, t: int, t_prime: int, prop: PropensityModel,
              outcome: OutcomeModel | None = None, intercept: bool = True) -> float:
    """AIPW estimate of ``E[Y | do(t)] - E[Y | do(t')]`` adjusting for ``support``.

    The outcome model defaults to the restricted linear fit on ``data``; a
    known model can be passed via ``outcome``.
    """
    _check_pair(data.q, t, t_prime)
    if t == t_prime:
        return 0.0
    if len(support) == 0 and not intercept and outcome is None:
        raise ValueError("empty support needs an intercept-only outcome model")
    if outcome is None:
        outcome = fit_outcome_models(data, support, intercept)
    psi, clipped = dr_potential_outcomes(data, outcome, prop)
    if clipped > 0.2:
        warnings.warn(f"{clipped:.0%} of samples have clipped propensities", RuntimeWarning, stacklevel=2)
    return float(np.mean(psi[:, t] - psi[:, t_prime]))


@dataclass
class EffectEstimate:
    tau: dict
    pairwise: dict
    method: str
    std_dev: dict | None = None
    tau_std: dict | None = None
    n_splits: int = 1
    metadata: dict = field(default_factory=dict)


def _pairwise(tau: dict) -> dict:
    q = len(tau)
    out = {(t, t): 0.0 for t in range(q)}
    for t, s in permutations(range(q), 2):
        out[(t, s)] = tau[t] - tau[s]
    return out


def estimate_effects(data: PooledDataset, support: SupportSet, method: str = "dr", ridge: float = 1.0,
                     propensity_on: str = "support", intercept: bool = True,
                     clip_bounds=(0.01, 0.99)) -> EffectEstimate:
    """Single-sample effect estimates for every treatment on ``data``."""
    outcome = fit_outcome_models(data, support, intercept)
    meta = {"support_size": len(support)}
    if method == "plugin":
        tau_arr = outcome.predict(data.covariates).mean(axis=0)
    elif method in ("dr", "doubly_robust"):
        method = "doubly_robust"
        cols = support if propensity_on == "support" else SupportSet(tuple(range(data.p)), data.p)
        prop = fit_propensity(data, cols, ridge, clip_bounds)
        psi, clipped = dr_potential_outcomes(data, outcome, prop)
        tau_arr = psi.mean(axis=0)
        meta["clipped_fraction"] = clipped
        if clipped > 0.2:
            meta["warning"] = f"{clipped:.0%} of samples have clipped propensities"
    else:
        raise ValueError(f"unknown effect method {method!r}")
    tau = {t: float(tau_arr[t]) for t in range(data.q)}
    return EffectEstimate(tau, _pairwise(tau), method, metadata=meta)


def draw_split(data: PooledDataset, fraction: float, base_seed: int, split_index: int, max_redraws: int = 100):
    """Random ``(selection_rows, estimation_rows)`` with every cohort present on both sides."""
    if not 0 < fraction < 1:
        raise ValueError("selection fraction must lie strictly between 0 and 1")
    n_sel = int(round(fraction * data.n))
    for attempt in range(max_redraws):
        perm = make_rng(base_seed, "split", split_index, attempt).permutation(data.n)
        sel, est = np.sort(perm[:n_sel]), np.sort(perm[n_sel:])
        t = data.treatment
        if (np.bincount(t[sel], minlength=data.q).min() > 0
                and np.bincount(t[est], minlength=data.q).min() > 0):
            return sel, est
    raise DataError(f"could not draw a split with every cohort on both sides after {max_redraws} attempts")


def two_stage_pipeline(data: PooledDataset, selection_fraction: float = 0.2, selection_config=None,
                       effect_method: str = "dr", n_splits: int = 20, base_seed: int = 0,
                       ridge: float = 1.0, propensity_on: str = "support", support: SupportSet | None = None,
                       intercept: bool = True) -> EffectEstimate:
    """Select on a random fraction of the rows, estimate effects on the rest, repeat.

    ``support`` bypasses the selection stage (oracle runs); the split is still
    drawn so estimates use the same rows as a selecting run would.
    """
    from .selection import SelectionConfig, select

    cfg = selection_config or SelectionConfig()
    q = data.q
    taus, pairs, sizes, supports, notes = [], [], [], [], []
    for s in range(n_splits):
        sel_rows, est_rows = draw_split(data, selection_fraction, base_seed, s)
        if support is None:
            res = select(partition_by_treatment(data.subset(sel_rows)), cfg)
            S = res.support
        else:
            S = support
        est = estimate_effects(data.subset(est_rows), S, effect_method, ridge, propensity_on, intercept)
        taus.append([est.tau[t] for t in range(q)])
        pairs.append(est.pairwise)
        sizes.append(len(S))
        supports.append(S.indices)
        if "warning" in est.metadata:
            notes.append(f"split {s}: {est.metadata['warning']}")
    taus = np.array(taus)
    ddof = 1 if n_splits > 1 else 0
    tau = {t: float(taus[:, t].mean()) for t in range(q)}
    keys = list(pairs[0])
    pairwise = _pairwise(tau)
    std = {k: float(np.std([pr[k] for pr in pairs], ddof=ddof)) for k in keys} if n_splits > 1 else None
    tau_std = {t: float(taus[:, t].std(ddof=ddof)) for t in range(q)} if n_splits > 1 else None
    meta = {
        "mean_support_size": float(np.mean(sizes)),
        "supports": supports,
        "selection_fraction": selection_fraction,
        "base_seed": base_seed,
        "warnings": notes,
    }
    method = "plugin" if effect_method == "plugin" else "doubly_robust"
    return EffectEstimate(tau, pairwise, method, std, tau_std, n_splits, meta)
