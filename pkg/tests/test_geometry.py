import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softfqi.errors import (DegenerateSupportError, DimensionError, InvalidSpecError, NoGapError,
                            NonConvergenceError, SingularDesignError)
from softfqi.features import FeatureMap, build_realizable_features, one_hot_features
from softfqi.geometry import (StateActionMeasure, contraction_profile, density_ratio,
                              gap_enhanced_profile, misspecification_gap, project,
                              projection_weighted_ls, reweight, stationarity_residual,
                              stationary_distribution, weighted_inner, weighted_l2_norm)
from softfqi.mdp import TabularMdp, behavior_measure, dirichlet_behavior_policy
from softfqi.soft_bellman import softmax_policy

from conftest import garnet, random_mdp, reference, single_state_mdp


def test_stationary_single_state():
    mu = stationary_distribution(single_state_mdp(), np.ones((1, 1)))
    assert mu.weights[0, 0] == 1.0


def test_stationary_two_state_swap_matches_linear_solve():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 1)), 0.9)
    # uniform start is already stationary for the swap; the eigenvector oracle agrees
    M = P[:, 0, :]
    A = np.vstack([M.T - np.eye(2), np.ones(2)])
    oracle = np.linalg.lstsq(A, [0.0, 0.0, 1.0], rcond=None)[0]
    mu = stationary_distribution(mdp, np.ones((2, 1)))
    assert np.allclose(mu.weights[:, 0], oracle, atol=1e-15)
    assert np.allclose(oracle, 0.5)


def test_stationary_periodic_chain_needs_retry():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 1)), 0.9)
    start = StateActionMeasure(np.array([[0.9], [0.1]]))
    with pytest.raises(NonConvergenceError) as info:
        stationary_distribution(mdp, np.ones((2, 1)), init=start, max_iter=50)
    assert info.value.residual > 0
    lazy = stationary_distribution(mdp, np.ones((2, 1)), init=start, lazy=True)
    assert np.allclose(lazy.weights[:, 0], 0.5, atol=1e-12)
    damped = stationary_distribution(mdp, np.ones((2, 1)), init=start, damping=0.1)
    assert damped.damped and np.allclose(damped.weights[:, 0], 0.5, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_stationary_garnet_residual_and_linear_solve(seed):
    mdp, q, pi, mu = reference(seed, 0.1)
    assert stationarity_residual(mdp, pi, mu) <= 1e-12
    # independent oracle: null vector of (M^T - I) via dense least squares
    S, A = mdp.shape
    M = (mdp.transition.reshape(S * A, S)[:, :, None] * pi[None, :, :]).reshape(S * A, S * A)
    sys_ = np.vstack([M.T - np.eye(S * A), np.ones(S * A)])
    rhs = np.zeros(S * A + 1)
    rhs[-1] = 1.0
    oracle = np.linalg.lstsq(sys_, rhs, rcond=None)[0]
    assert np.abs(oracle - mu.weights.ravel()).sum() <= 1e-10


def test_stationary_input_validation():
    with pytest.raises(InvalidSpecError):
        stationary_distribution(garnet(0), np.full((50, 4), 0.25), tol=0.0)
    with pytest.raises(DimensionError):
        stationary_distribution(garnet(0), np.full((5, 4), 0.25))


def test_norm_examples(rng):
    m = StateActionMeasure(rng.dirichlet(np.ones(12)).reshape(4, 3))
    assert weighted_l2_norm(np.full((4, 3), -2.5), m) == pytest.approx(2.5, abs=1e-15)
    w = np.full((2, 2), 0.7 / 3)
    w[1, 0] = 0.3
    ind = np.zeros((2, 2))
    ind[1, 0] = 1.0
    assert weighted_l2_norm(ind, StateActionMeasure(w)) == pytest.approx(math.sqrt(0.3), abs=1e-15)
    f = rng.normal(size=(4, 3))
    naive = math.sqrt(sum(m.weights[s, a] * f[s, a] ** 2 for s in range(4) for a in range(3)))
    assert abs(weighted_l2_norm(f, m) - naive) <= 1e-14
    with pytest.raises(DimensionError):
        weighted_l2_norm(np.zeros((3, 3)), m)


def test_measure_validation():
    with pytest.raises(InvalidSpecError):
        StateActionMeasure(np.array([[0.5, 0.6]]))
    with pytest.raises(InvalidSpecError):
        StateActionMeasure(np.array([[1.5, -0.5]]))
    with pytest.raises(DegenerateSupportError):
        StateActionMeasure.from_unnormalized(np.zeros((2, 2)))


def test_density_ratio_examples():
    mu = np.array([[0.75, 0.25]])
    nu = np.array([[0.5, 0.5]])
    r = density_ratio(mu, nu)
    assert np.array_equal(r.ratio, [[1.5, 0.5]]) and r.support_violations == 0
    assert np.array_equal(density_ratio(nu, nu).ratio, np.ones((1, 2)))
    gapped = density_ratio(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    assert np.array_equal(gapped.ratio, [[0.5, 0.0]]) and gapped.support_violations == 1


@pytest.mark.parametrize("seed", range(3))
def test_density_ratio_full_support_garnet(seed):
    mdp, _, _, mu = reference(seed, 0.1)
    nu = behavior_measure(mdp, dirichlet_behavior_policy(mdp, seed))
    r = density_ratio(mu, nu, floor=1e-12)
    assert r.support_violations == 0
    # norm equivalence with exact ratio: ||f||_{w nu} = ||f||_{mu}
    f = np.random.default_rng(seed).normal(size=mdp.shape)
    assert abs(weighted_l2_norm(f, reweight(r, nu)) - weighted_l2_norm(f, mu)) <= 1e-12


def test_projection_span_and_complete_basis(rng):
    mdp = garnet(1)
    m = StateActionMeasure(rng.dirichlet(np.ones(200)).reshape(50, 4))
    fm = FeatureMap(rng.normal(size=(50, 4, 6)))
    target = fm.evaluate_theta(rng.normal(size=6))
    assert weighted_l2_norm(project(target, fm, m) - target, m) <= 1e-10
    y = rng.normal(size=(50, 4))
    assert np.abs(project(y, one_hot_features(mdp), m) - y).max() <= 1e-12


def test_projection_constant_feature_gives_mean(rng):
    y = rng.normal(size=(5, 3))
    fm = FeatureMap(np.ones((5, 3, 1)))
    theta = projection_weighted_ls(y, fm, StateActionMeasure.uniform((5, 3))).theta
    assert theta[0] == pytest.approx(y.mean(), abs=1e-14)


def test_projection_singular_design():
    fm = FeatureMap(np.ones((3, 2, 2)))
    with pytest.raises(SingularDesignError, match="ridge"):
        projection_weighted_ls(np.zeros((3, 2)), fm, StateActionMeasure.uniform((3, 2)))
    ridge = projection_weighted_ls(np.ones((3, 2)), fm, StateActionMeasure.uniform((3, 2)),
                                   ridge=1e-8)
    assert np.allclose(ridge.theta, 0.5, atol=1e-6)


def test_projection_ridge_matches_closed_form(rng):
    fm = FeatureMap(rng.normal(size=(4, 3, 3)))
    m = StateActionMeasure(rng.dirichlet(np.ones(12)).reshape(4, 3))
    y = rng.normal(size=(4, 3))
    X, W = fm.matrix, np.diag(m.weights.ravel())
    oracle = np.linalg.solve(X.T @ W @ X + 0.1 * np.eye(3), X.T @ W @ y.ravel())
    assert np.allclose(projection_weighted_ls(y, fm, m, ridge=0.1).theta, oracle, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_projection_geometry_properties(seed):
    rng = np.random.default_rng(seed)
    fm = FeatureMap(rng.normal(size=(6, 3, 4)))
    m = StateActionMeasure(rng.dirichlet(np.ones(18)).reshape(6, 3))
    y = rng.normal(size=(6, 3))
    py = project(y, fm, m)
    assert weighted_l2_norm(project(py, fm, m) - py, m) <= 1e-10
    resid = y - py
    for j in range(4):
        assert abs(weighted_inner(fm.features[:, :, j], resid, m)) <= 1e-8
    lhs = weighted_l2_norm(y, m) ** 2
    rhs = weighted_l2_norm(py, m) ** 2 + weighted_l2_norm(resid, m) ** 2
    assert abs(lhs - rhs) <= 1e-10


def test_misspecification_gap_examples(rng):
    mdp, q, _, mu = reference(0, 0.1)
    fm = build_realizable_features(q, 5, 0, mu)
    assert misspecification_gap(q, fm, mu) <= 1e-9
    # rank-one class phi = q + v with v mu-orthogonal to q
    v = rng.normal(size=q.shape)
    v -= weighted_inner(v, q, mu) / weighted_inner(q, q, mu) * q
    phi = q + v
    coef = weighted_inner(q, phi, mu) / weighted_inner(phi, phi, mu)
    oracle = weighted_l2_norm(q - coef * phi, mu)
    gap = misspecification_gap(q, FeatureMap(phi[:, :, None]), mu)
    assert gap == pytest.approx(oracle, rel=1e-10)
    assert gap > 0


def test_profile_radius_zero_and_formula():
    mdp, q, pi, mu = reference(0, 0.1)
    prof = contraction_profile(mdp, 0.1, mu, pi)
    assert prof.rho(0.0) == 0.99
    w = mu.weights
    beta = 0.99 / 0.2 / math.sqrt(w.min()) * math.sqrt(4 / pi.min())
    assert prof.beta_loc == pytest.approx(beta, rel=1e-14)
    assert prof.r0 == pytest.approx(0.01 / beta, rel=1e-14)
    assert prof.rho(prof.r0) == pytest.approx(1.0, rel=1e-14)
    assert prof.r_max == prof.r0
    with_gap = contraction_profile(mdp, 0.1, mu, pi, eps_f=prof.r0 / 4)
    assert with_gap.r_max == pytest.approx(0.75 * prof.r0, rel=1e-14)
    assert with_gap.rho_eff(0.0) == pytest.approx(with_gap.rho(prof.r0 / 4), rel=1e-14)


def test_profile_tau_scaling():
    mdp, q, pi, mu = reference(1, 0.1)
    a = contraction_profile(mdp, 0.1, mu, pi)
    b = contraction_profile(mdp, 0.2, mu, pi)
    assert b.beta_loc == pytest.approx(a.beta_loc / 2, rel=1e-14)
    assert b.r0 == pytest.approx(2 * a.r0, rel=1e-14)


def test_profile_general_alpha():
    mdp, q, pi, mu = reference(1, 0.1)
    p = contraction_profile(mdp, 0.1, mu, pi, alpha=0.5)
    assert p.r0 == pytest.approx((0.01 / p.beta_loc) ** 2, rel=1e-12)


def test_profile_degenerate_support():
    mdp, q, pi, mu = reference(0, 0.1)
    w = np.array(mu.weights)
    w[0, 0] = 0.0
    with pytest.raises(DegenerateSupportError):
        contraction_profile(mdp, 0.1, StateActionMeasure.from_unnormalized(w), pi)


def test_gap_profile():
    mdp, q, pi, mu = reference(0, 0.1)
    base = contraction_profile(mdp, 0.1, mu, pi)
    p = base.__class__(**{**base.__dict__, "tau": 0.01})
    g = gap_enhanced_profile(p, 0.2, c_gap=2.0, r_gap=0.3)
    direct = 0.99 / 0.01 * p.c_inf * math.sqrt(4 / p.pi_min) * 2.0 * math.exp(-10.0)
    assert g.beta_loc == pytest.approx(direct, rel=1e-14)
    assert g.r0 == pytest.approx(min(0.3, (1 - 0.99) / direct), rel=1e-14)
    tiny = base.__class__(**{**base.__dict__, "tau": 1e-4})
    assert gap_enhanced_profile(tiny, 0.2, 1.0, 0.3).r0 == 0.3
    assert gap_enhanced_profile(tiny, 0.2, 1.0, 0.3).beta_loc < 1e-300
    with pytest.raises(NoGapError):
        gap_enhanced_profile(p, 0.0, 1.0, 0.3)


def test_reweight_normalizes(rng):
    mdp = random_mdp(rng)
    nu = behavior_measure(mdp, np.full((4, 3), 1 / 3))
    m = reweight(density_ratio(np.full((4, 3), 1 / 12), nu), nu)
    assert abs(m.weights.sum() - 1.0) <= 1e-12
