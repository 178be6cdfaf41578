"""Seeded synthetic data: Gaussian covariates, softmax treatment assignment and
a row-sparse linear outcome model per treatment.

Randomness comes from numpy's Philox4x64 counter-based generator.  Independent
streams are keyed by ``base_seed XOR h(labels)`` where ``h`` is a 64-bit BLAKE2b
digest of the labels (e.g. a trial index), so results do not depend on the
order in which trials run.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .model import DataError, PooledDataset
from .solver import SupportSet

MASK64 = (1 << 64) - 1


def stream_key(base_seed: int, *labels) -> int:
    if not labels:
        return int(base_seed) & MASK64
    digest = hashlib.blake2b(repr(tuple(labels)).encode(), digest_size=8).digest()
    return (int(base_seed) ^ int.from_bytes(digest, "little")) & MASK64


def make_rng(base_seed: int, *labels) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(base_seed, *labels)))


@dataclass(frozen=True)
class SynthSpec:
    p: int
    q: int
    k: int
    n: int
    seed: int = 0
    noise_sigma: float = 1.0
    coef_scale: float = 1.0
    phi_scale: float = 1.0
    phi_support: tuple | None = None
    beta_min: float = 0.0
    x_mean: float = 0.0
    x_cov: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if min(self.p, self.q, self.k, self.n) < 1:
            raise ValueError("p, q, k, n must be positive")
        if self.k > self.p:
            raise ValueError(f"k={self.k} exceeds p={self.p}")
        if self.q < 2:
            raise ValueError("need q >= 2 treatments")
        if self.noise_sigma < 0 or self.coef_scale <= 0 or self.phi_scale < 0:
            raise ValueError("invalid scale parameters")


@dataclass
class SynthDraw:
    data: PooledDataset
    true_support: SupportSet
    true_theta: np.ndarray
    true_phi: np.ndarray
    true_ate: dict
    sample_ate: dict
    x_mean: np.ndarray = field(default=None, repr=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def draw_sparse_theta(rng, p: int, q: int, k: int, coef_scale: float, beta_min: float = 0.0,
                      max_redraws: int = 10_000):
    support = np.sort(rng.choice(p, size=k, replace=False))
    rows = rng.normal(0.0, coef_scale, size=(k, q))
    # rows are independent, so redrawing only the weak ones conditions each row separately
    for _ in range(max_redraws):
        weak = np.sqrt((rows ** 2).sum(axis=1)) < beta_min
        if not weak.any():
            break
        rows[weak] = rng.normal(0.0, coef_scale, size=(int(weak.sum()), q))
    else:
        raise ValueError(f"could not draw coefficients with minimum row norm {beta_min}")
    theta = np.zeros((p, q))
    theta[support] = rows
    return SupportSet(tuple(support), p), theta


def effect_table(theta: np.ndarray, mean: np.ndarray) -> dict:
    """``(t, t') -> (theta[:, t] - theta[:, t'])^T mean`` over all ordered pairs."""
    q = theta.shape[1]
    tau = theta.T @ mean
    out = {(t, t): 0.0 for t in range(q)}
    for t, s in permutations(range(q), 2):
        out[(t, s)] = float(tau[t] - tau[s])
    return out


def generate(spec: SynthSpec) -> SynthDraw:
    rng = make_rng(spec.seed)
    p, q, n = spec.p, spec.q, spec.n
    support, theta = draw_sparse_theta(rng, p, q, spec.k, spec.coef_scale, spec.beta_min)
    phi = rng.normal(0.0, 1.0, size=(p, q)) * spec.phi_scale
    if spec.phi_support is not None:
        keep = np.zeros(p, dtype=bool)
        keep[list(spec.phi_support)] = True
        phi[~keep] = 0.0
    Z = rng.standard_normal((n, p))
    if spec.x_cov is not None:
        Z = Z @ np.linalg.cholesky(np.asarray(spec.x_cov, dtype=np.float64)).T
    X = Z + spec.x_mean
    t = sample_categorical(softmax(X @ phi), rng)
    eps = rng.standard_normal(n) * spec.noise_sigma
    y = np.einsum("ij,ij->i", X, theta[:, t].T) + eps
    data = PooledDataset(X, t, y, q=q)
    pop_mean = np.full(p, float(spec.x_mean))
    return SynthDraw(
        data=data,
        true_support=support,
        true_theta=theta,
        true_phi=phi,
        true_ate=effect_table(theta, pop_mean),
        sample_ate=effect_table(theta, X.mean(axis=0)),
        x_mean=pop_mean,
    )


@dataclass(frozen=True)
class SemiSynthSpec:
    k: int
    seed: int = 0
    noise_sigma: float = 1.0
    coef_scale: float = 1.0
    beta_min: float = 0.0


def generate_semisynthetic(covariates, treatment, spec: SemiSynthSpec, columns=None) -> SynthDraw:
    """Keep the given covariates and treatments; draw a sparse linear response."""
    X = np.asarray(covariates, dtype=np.float64)
    t = np.asarray(treatment)
    if X.ndim != 2 or t.shape != (X.shape[0],):
        raise DataError("covariates and treatment do not align")
    if not np.all(np.isfinite(X)):
        raise DataError("covariates contain non-finite values")
    labels = np.unique(t)
    if labels.size < 2:
        raise DataError("treatment is constant; need at least two treatment levels")
    t = np.searchsorted(labels, t)
    p, q = X.shape[1], labels.size
    if spec.k > p:
        raise ValueError(f"k={spec.k} exceeds p={p}")
    rng = make_rng(spec.seed)
    support, theta = draw_sparse_theta(rng, p, q, spec.k, spec.coef_scale, spec.beta_min)
    y = np.einsum("ij,ij->i", X, theta[:, t].T) + rng.standard_normal(X.shape[0]) * spec.noise_sigma
    mean = X.mean(axis=0)
    ate = effect_table(theta, mean)
    return SynthDraw(
        data=PooledDataset(X, t, y, q=q, columns=columns, labels=tuple(labels.tolist())),
        true_support=support,
        true_theta=theta,
        true_phi=np.zeros((p, q)),
        true_ate=ate,
        sample_ate=dict(ate),
        x_mean=mean,
    )


def ihdp_like_covariates(n: int = 747, seed: int = 0, n_continuous: int = 6, n_binary: int = 19,
                         treated_fraction: float = 0.19):
    """Stand-in for a user-supplied IHDP file: continuous and binary covariates
    with nonzero means and a covariate-dependent (biased) binary treatment."""
    rng = make_rng(seed, "ihdp-covariates")
    cont = rng.standard_normal((n, n_continuous)) + rng.uniform(0.5, 2.0, size=n_continuous)
    probs = rng.uniform(0.2, 0.8, size=n_binary)
    binary = (rng.random((n, n_binary)) < probs).astype(np.float64)
    X = np.hstack([cont, binary])
    w = rng.normal(0.0, 0.5, size=X.shape[1])
    score = (X - X.mean(axis=0)) @ w
    latent = score + rng.logistic(size=n)
    t = (latent > np.quantile(latent, 1.0 - treated_fraction)).astype(np.int64)
    return X, t
