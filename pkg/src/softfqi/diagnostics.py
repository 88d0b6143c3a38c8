"""Numerical certificates for the local theory of the soft Bellman operator.

Derivative checks compare the analytic operator derivatives against central
finite differences of the operator itself. Contraction and remainder checks
work with increments ``T(Q* + delta) - T(Q*)`` evaluated without
cancellation, so radii far below the magnitude of ``Q*`` stay meaningful.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, OutOfRegionError
from .geometry import (as_weights, contraction_profile, project, weighted_l2_norm)
from .fqi import robust_stationary
from .rng import stream
from .soft_bellman import (d2T_apply, dT_apply, soft_bellman_apply, soft_value_increment,
                           softmax_policy, solve_soft_q_star)

# Central tolerance block; every check reports the measured value next to it.
TOLERANCES = {
    "first_derivative_eps": 1e-5,
    "first_derivative_rel": 1e-6,
    "second_derivative_eps": 1e-3,
    "second_derivative_rel": 1e-4,
    "derivative_tau_floor": 0.01,
    "certificate_slack": 1e-9,
    "remainder_scale": 1e-12,
    "stationarity_l1": 1e-12,
    "orthogonality": 1e-8,
    "hardmax_tau": 1e-9,
}


def _unit_direction(rng, shape, measure):
    h = rng.standard_normal(shape)
    return h / weighted_l2_norm(h, measure)


def _relative(diff, ref):
    if ref > 0:
        return diff / ref
    return 0.0 if diff == 0 else np.inf


def _default_measure(mdp, q, tau, measure):
    if measure is not None:
        return measure
    return robust_stationary(mdp, softmax_policy(q, tau))


def _check_tau_floor(tau):
    if tau < TOLERANCES["derivative_tau_floor"]:
        raise InvalidSpecError(
            f"finite-difference derivative checks are unreliable below tau="
            f"{TOLERANCES['derivative_tau_floor']} (got {tau})")


def check_first_derivative(mdp, q, tau, n_directions=20, eps=1e-5, seed=0, measure=None):
    """Worst relative error of ``dT_apply`` against central differences over random directions."""
    _check_tau_floor(tau)
    measure = _default_measure(mdp, q, tau, measure)
    rng = stream("diagnostics", seed, 1)
    worst = 0.0
    for _ in range(n_directions):
        h = _unit_direction(rng, mdp.shape, measure)
        fd = (soft_bellman_apply(mdp, q + eps * h, tau)
              - soft_bellman_apply(mdp, q - eps * h, tau)) / (2 * eps)
        an = dT_apply(mdp, q, tau, h)
        worst = max(worst, _relative(weighted_l2_norm(fd - an, measure),
                                     weighted_l2_norm(an, measure)))
    return worst


def check_second_derivative(mdp, q, tau, n_directions=20, eps=1e-3, seed=0, measure=None):
    """Worst relative error of ``d2T_apply(h, h)`` against second central differences."""
    _check_tau_floor(tau)
    measure = _default_measure(mdp, q, tau, measure)
    rng = stream("diagnostics", seed, 2)
    t0 = soft_bellman_apply(mdp, q, tau)
    worst = 0.0
    for _ in range(n_directions):
        h = _unit_direction(rng, mdp.shape, measure)
        fd = (soft_bellman_apply(mdp, q + eps * h, tau) - 2 * t0
              + soft_bellman_apply(mdp, q - eps * h, tau)) / eps**2
        an = d2T_apply(mdp, q, tau, h, h)
        worst = max(worst, _relative(weighted_l2_norm(fd - an, measure),
                                     weighted_l2_norm(an, measure)))
    return worst


@dataclass
class ContractionCertificate:
    radius_tested: float
    pairs_tested: int
    max_observed_ratio: float
    bound_rho: float
    violations: int
    projected_max_ratio: float
    projected_violations: int
    slack: float
    r0: float
    gap: float

    @property
    def passed(self):
        return self.violations == 0 and self.projected_violations == 0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__} | {"passed": self.passed}


def certify_contraction(mdp, tau, q_star, features, mu_star, radius, n_pairs=200, seed=0,
                        slack=None, profile=None):
    """Sample pairs in ``F`` within ``radius`` of ``q_star`` and compare Lipschitz ratios to ``rho(radius)``.

    Points are ``Pi_F q_star + d * u`` with ``u`` a random feature direction of
    unit stationary norm and ``d`` log-uniform in ``[1e-3, 1] * sqrt(radius^2 - gap^2)``,
    so every point lies in the ball by orthogonality of the projection
    residual. Every tenth pair uses ``q_star`` itself as the second point.
    Ratios are checked for both ``T`` and ``Pi_F T``.
    """
    slack = TOLERANCES["certificate_slack"] if slack is None else slack
    q_star = np.asarray(q_star, dtype=float)
    pi_star = softmax_policy(q_star, tau)
    center = project(q_star, features, mu_star)
    offset = center - q_star
    gap = weighted_l2_norm(offset, mu_star)
    if profile is None:
        profile = contraction_profile(mdp, tau, mu_star, pi_star, eps_f=gap)
    if radius >= profile.r0:
        raise OutOfRegionError(f"radius {radius:.3e} is not below r0={profile.r0:.3e}")
    if radius <= gap:
        raise OutOfRegionError(f"radius {radius:.3e} does not exceed the misspecification gap")
    d_max = np.sqrt(radius**2 - gap**2)
    bound = float(profile.rho(radius))
    rng = stream("diagnostics", seed, 3)
    gamma = mdp.discount

    def sample():
        u = features.evaluate_theta(rng.standard_normal(features.p))
        u = u / weighted_l2_norm(u, mu_star)
        d = d_max * 10 ** rng.uniform(-3.0, 0.0)
        return offset + d * u

    def increment(delta):
        return gamma * mdp.expect_next(soft_value_increment(q_star, delta, tau))

    worst = worst_proj = 0.0
    bad = bad_proj = tested = 0
    for i in range(n_pairs):
        d1 = sample()
        d2 = np.zeros_like(q_star) if i % 10 == 0 else sample()
        den = weighted_l2_norm(d1 - d2, mu_star)
        if den == 0:
            continue
        dT = increment(d1) - increment(d2)
        ratio = weighted_l2_norm(dT, mu_star) / den
        ratio_proj = weighted_l2_norm(project(dT, features, mu_star), mu_star) / den
        worst, worst_proj = max(worst, ratio), max(worst_proj, ratio_proj)
        bad += ratio > bound + slack
        bad_proj += ratio_proj > bound + slack
        tested += 1
    return ContractionCertificate(float(radius), tested, float(worst), bound, int(bad),
                                  float(worst_proj), int(bad_proj), slack, profile.r0, gap)


def remainder_terms(mdp, tau, q_star, mu_star, delta, beta_loc):
    """Return ``(lhs, rhs)`` of the second-order remainder bound at ``Q = q_star + delta``.

    ``lhs = ||T(Q) - T_eval_{Q*}(Q)||`` equals the norm of
    ``T(Q* + delta) - T(Q*) - gamma P_eval delta``, which holds for the
    evaluation operator identically and does not rely on ``q_star`` being
    an exact fixed point.
    """
    pi = softmax_policy(q_star, tau)
    row = soft_value_increment(q_star, delta, tau) - (pi * delta).sum(axis=1)
    lhs = weighted_l2_norm(mdp.discount * mdp.expect_next(row), mu_star)
    rhs = 0.5 * beta_loc * weighted_l2_norm(delta, mu_star) ** 2
    return lhs, rhs


@dataclass
class RemainderReport:
    worst_slack: float
    radii: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    beta_loc: float


def check_remainder_bound(mdp, tau, q_star, mu_star, n_samples=100, max_radius=None, seed=0,
                          profile=None, report=False):
    """Largest ``lhs - rhs`` over random points at log-uniform radii up to ``max_radius``.

    ``max_radius`` defaults to half the contraction radius. Directions are
    unrestricted tables (the bound with ``C_inf = 1/sqrt(min mu*)`` holds for
    every table, not only feature spans).
    """
    q_star = np.asarray(q_star, dtype=float)
    if profile is None:
        profile = contraction_profile(mdp, tau, mu_star, softmax_policy(q_star, tau))
    if max_radius is None:
        max_radius = 0.5 * profile.r0
    rng = stream("diagnostics", seed, 4)
    radii, lhs, rhs = [0.0], [], []
    l0, r0 = remainder_terms(mdp, tau, q_star, mu_star, np.zeros_like(q_star), profile.beta_loc)
    lhs.append(l0)
    rhs.append(r0)
    for _ in range(n_samples):
        rad = max_radius * 10 ** rng.uniform(-3.0, 0.0)
        delta = rad * _unit_direction(rng, q_star.shape, mu_star)
        lo, hi = remainder_terms(mdp, tau, q_star, mu_star, delta, profile.beta_loc)
        radii.append(rad)
        lhs.append(lo)
        rhs.append(hi)
    lhs, rhs = np.asarray(lhs), np.asarray(rhs)
    worst = float(np.max(lhs - rhs))
    if report:
        return RemainderReport(worst, np.asarray(radii), lhs, rhs, profile.beta_loc)
    return worst


@dataclass
class GapReport:
    delta: float
    argmax_actions: list
    margins: np.ndarray
    ties: list = field(default_factory=list)

    @property
    def margin_summary(self):
        if self.margins.size == 0:
            return {}
        m = self.margins
        return {"min": float(m.min()), "median": float(np.median(m)),
                "mean": float(m.mean()), "max": float(m.max())}

    def to_dict(self):
        return {"delta": self.delta, "argmax_actions": self.argmax_actions,
                "ties": self.ties, "margins": self.margin_summary}


def measure_action_gap(mdp, tol=1e-9, q_hard=None):
    """Uniform action gap of the hardmax-limit optimum (soft solve at tau = 1e-9).

    ``delta`` is half the smallest best-minus-second-best margin; it is 0 when
    some state has a tie within ``tol`` and infinite with a single action.
    """
    if q_hard is None:
        q_hard = solve_soft_q_star(mdp, TOLERANCES["hardmax_tau"], tol=1e-11).q_star
    q_hard = np.asarray(q_hard, dtype=float)
    argmax = [int(a) for a in np.argmax(q_hard, axis=1)]
    if mdp.n_actions == 1:
        return GapReport(np.inf, argmax, np.empty(0))
    top2 = -np.sort(-q_hard, axis=1)[:, :2]
    margins = top2[:, 0] - top2[:, 1]
    ties = [int(s) for s in np.flatnonzero(margins <= tol)]
    delta = 0.0 if ties else float(margins.min() / 2)
    return GapReport(delta, argmax, margins, ties)


def orthogonality_residual(target, features, measure):
    """Largest ``|<phi_j, y - Pi y>_m|`` over features ``j``."""
    resid = np.asarray(target) - project(target, features, measure)
    w = as_weights(measure)
    return float(np.max(np.abs(np.einsum("saj,sa->j", features.features, w * resid))))
