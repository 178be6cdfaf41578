import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointsparse.model import (
    CohortDataset,
    compute_moments,
    loss,
    moments_from_arrays,
    norm_12,
    partition_by_treatment,
)
from jointsparse.penalties import RegularizerSpec, rho
from jointsparse.solver import (
    SolverConfig,
    SolverError,
    SupportSet,
    fit,
    fit_restricted,
    is_stationary,
    objective,
    power_max_eig,
    prox_l12,
    resolve_config,
)
from jointsparse.synth import SynthSpec, generate

from conftest import random_cohorts

MCP = RegularizerSpec("MCP", 0.1, 3.0)


def test_prox_closed_form():
    np.testing.assert_allclose(prox_l12([[3.0, 4.0]], 1.0), [[2.4, 3.2]], rtol=0, atol=1e-15)
    assert np.array_equal(prox_l12([[0.6, 0.8]], 2.0), [[0.0, 0.0]])
    x = np.array([[1.0, -2.0], [0.0, 0.0], [5.0, 1e-9]])
    assert np.array_equal(prox_l12(x, 0.0), x)
    assert np.array_equal(prox_l12(np.zeros((2, 3)), 1.0), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        prox_l12(x, -1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0))
def test_prox_nonexpansive_and_direction(seed, thr):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, 6, 3))
    pa, pb = prox_l12(a, thr), prox_l12(b, thr)
    assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12
    for row_in, row_out in zip(a, pa):
        if np.any(row_out != 0):
            scale = row_out @ row_in / (row_in @ row_in)
            assert scale > 0
            np.testing.assert_allclose(row_out, scale * row_in, rtol=1e-12, atol=1e-15)


def test_objective_trivial():
    m = moments_from_arrays([[[1.0]]], [1.0])
    assert objective(np.zeros((1, 1)), m, MCP) == 0.0
    reg = RegularizerSpec("MCP", 10.0, 3.0)
    # loss(1) = -0.5, penalty = 10 - 1/6
    assert objective(np.ones((1, 1)), m, reg) == pytest.approx(-0.5 + 10 - 1 / 6, abs=1e-13)


def test_objective_compositional(rng, small_problem):
    _, m = small_problem
    theta = rng.normal(size=(5, 3))
    reg = RegularizerSpec("SCAD", 0.8)
    expected = loss(theta, m) + sum(rho(np.linalg.norm(r), reg) for r in theta)
    assert abs(objective(theta, m, reg) - expected) < 1e-12


def test_power_iteration_close_to_eigvalsh(small_problem):
    _, m = small_problem
    exact = max(np.linalg.eigvalsh(G)[-1] for G in m.gram)
    est = power_max_eig(m)
    # a Rayleigh quotient never exceeds the top eigenvalue
    assert 0.95 * exact <= est <= exact * (1 + 1e-12)


def test_config_validation():
    for bad in ({"backtrack_c": 1.0}, {"backtrack_c": 0.0}, {"radius_R": np.inf}, {"radius_R": -1},
                {"step_init": 0.0}, {"prox_scaling": "other"}, {"tol": 0.0}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_large_lambda_gives_zero(small_problem):
    _, m = small_problem
    step = resolve_config(m).step_init
    lam = 2 * np.abs(m.cross).max() / min(1.0, step)
    res = fit(m, RegularizerSpec("MCP", lam))
    assert np.array_equal(res.theta_hat, np.zeros((5, 3)))
    assert len(res.support) == 0
    assert res.converged


def test_noiseless_recovery():
    draw = generate(SynthSpec(p=3, q=2, k=1, n=500, seed=4, noise_sigma=0.0, coef_scale=2.0, beta_min=1.0))
    data = partition_by_treatment(draw.data)
    res = fit(data, RegularizerSpec("MCP", 0.1))
    assert res.converged
    assert res.support == draw.true_support
    assert np.abs(res.theta_hat - draw.true_theta).max() < 0.05
    # oracle: per-cohort least squares on the true support
    ols = fit_restricted(data, draw.true_support)
    np.testing.assert_allclose(ols, draw.true_theta, atol=1e-10)


def test_fit_invariants(rng):
    data = random_cohorts(rng, 12, 3, sizes=[80, 60, 70])
    m = compute_moments(data)
    for kind in ("MCP", "SCAD", "L1"):
        cfg = resolve_config(m)
        res = fit(m, RegularizerSpec(kind, 0.3), cfg)
        assert res.converged, res.message
        assert norm_12(res.theta_hat) < cfg.radius_R
        assert all(b <= a for a, b in zip(res.objective_trace, res.objective_trace[1:]))
        assert res.final_objective == res.objective_trace[-1]
        assert res.support == SupportSet.from_theta(res.theta_hat)
        zero = ~res.support.mask()
        assert np.all(res.theta_hat[zero] == 0.0)
        assert is_stationary(res.theta_hat, m, RegularizerSpec(kind, 0.3), res.step, tol=1e-5)


def test_every_iterate_feasible(rng):
    data = random_cohorts(rng, 10, 2, sizes=[50, 50])
    m = compute_moments(data)
    R = 0.5 * norm_12(fit(m, RegularizerSpec("MCP", 0.05)).theta_hat)
    res = fit(m, RegularizerSpec("MCP", 0.05), SolverConfig(radius_R=R, max_iters=200))
    assert norm_12(res.theta_hat) < R


def test_theta_init_outside_ball(small_problem):
    _, m = small_problem
    with pytest.raises(ValueError):
        fit(m, MCP, SolverConfig(radius_R=1.0, theta_init=np.full((5, 3), 10.0)))


def test_line_search_exhaustion_reported(small_problem):
    _, m = small_problem
    theta0 = np.full((5, 3), 0.1)
    # radius just above the start: every candidate that moves outward is rejected
    res = fit(m, MCP, SolverConfig(radius_R=norm_12(theta0) * (1 + 1e-15), theta_init=theta0, max_iters=50))
    assert isinstance(res.converged, bool)
    if not res.converged:
        assert res.message


def _cd_lasso(G, g, lam, iters=20000):
    """Coordinate-descent lasso on 0.5 b'Gb - g'b + lam |b|_1."""
    b = np.zeros(g.size)
    for _ in range(iters):
        old = b.copy()
        for i in range(g.size):
            z = g[i] - G[i] @ b + G[i, i] * b[i]
            b[i] = np.sign(z) * max(abs(z) - lam, 0.0) / G[i, i]
        if np.max(np.abs(b - old)) < 1e-14:
            break
    return b


def test_l1_single_column_matches_coordinate_descent(rng):
    X = rng.normal(size=(200, 8))
    y = X @ np.array([2.0, -1.0, 0, 0, 0.5, 0, 0, 0]) + rng.normal(size=200)
    m = moments_from_arrays((X.T @ X / 200)[None], (X.T @ y / 200)[:, None])
    res = fit(m, RegularizerSpec("L1", 0.1), SolverConfig(tol=1e-12, max_iters=100000))
    oracle = _cd_lasso(m.gram[0], m.cross[:, 0], 0.1)
    assert np.max(np.abs(res.theta_hat[:, 0] - oracle)) < 1e-4


def test_paper_literal_scaling_runs(small_problem):
    _, m = small_problem
    res = fit(m, RegularizerSpec("MCP", 0.05), SolverConfig(prox_scaling="paper_literal", descent_guard=False,
                                                            max_iters=300))
    assert np.all(np.isfinite(res.theta_hat))
    assert norm_12(res.theta_hat) < resolve_config(m).radius_R


def test_fit_restricted_trivial(rng):
    data = random_cohorts(rng, 4, 2, sizes=[40, 30])
    full = fit_restricted(data, SupportSet(range(4), 4))
    for j, c in enumerate(data.cohorts):
        ols = np.linalg.lstsq(c.design, c.outcome, rcond=None)[0]
        np.testing.assert_allclose(full[:, j], ols, rtol=1e-10, atol=1e-12)
    assert np.array_equal(fit_restricted(data, SupportSet((), 4)), np.zeros((4, 2)))


def test_fit_restricted_residual_oracle(rng):
    for _ in range(50):
        p, q = int(rng.integers(3, 15)), int(rng.integers(2, 5))
        m = compute_moments(random_cohorts(rng, p, q))
        s = SupportSet(rng.choice(p, size=int(rng.integers(1, p + 1)), replace=False), p)
        theta = fit_restricted(m, s)
        idx = list(s)
        assert np.all(theta[~s.mask()] == 0)
        for j in range(q):
            r = m.gram[j][np.ix_(idx, idx)] @ theta[idx, j] - m.cross[idx, j]
            assert np.abs(r).max() < 1e-10


def test_fit_restricted_singular_names_cohort():
    X0 = np.random.default_rng(1).normal(size=(10, 3))
    X1 = np.ones((10, 3))
    data = CohortDataset([(X0, X0[:, 0]), (X1, np.ones(10))])
    with pytest.raises(SolverError, match="cohort 1"):
        fit_restricted(data, SupportSet((0, 1), 3))


def test_support_set():
    s = SupportSet((3, 1), 5)
    assert s.indices == (1, 3)
    assert list(s.mask()) == [False, True, False, True, False]
    assert s.jaccard(SupportSet((1,), 5)) == 0.5
    assert SupportSet((), 5).jaccard(SupportSet((), 5)) == 1.0
    with pytest.raises(ValueError):
        SupportSet((1, 1), 5)
    with pytest.raises(ValueError):
        SupportSet((5,), 5)


def test_fit_deterministic(small_problem):
    _, m = small_problem
    a, b = fit(m, MCP), fit(m, MCP)
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert a.objective_trace == b.objective_trace
