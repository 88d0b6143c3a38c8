"""Stationary measures, weighted norms, density ratios and weighted projections.

Also computes the local-contraction constants (curvature, radius, modulus)
that the diagnostics certify numerically.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .errors import (DegenerateSupportError, DimensionError, InvalidSpecError,
                     NoGapError, NonConvergenceError, SingularDesignError)
from .mdp import TabularMdp, check_policy

SUM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class StateActionMeasure:
    """Nonnegative weights over state-action pairs.

    ``damping`` is nonzero only for stationary measures computed with uniform
    teleportation; such measures are stationary for the damped chain, not the
    original one.
    """

    weights: np.ndarray
    normalized: bool = True
    damping: float = 0.0
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.ndim != 2:
            raise DimensionError("measure must be a 2-d table")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidSpecError("measure weights must be finite and nonnegative")
        if self.normalized and abs(w.sum() - 1.0) > SUM_TOL:
            raise InvalidSpecError(f"normalized measure sums to {w.sum()!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_unnormalized(cls, weights, **kw):
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise DegenerateSupportError("measure has no mass")
        return cls(w / total, normalized=True, **kw)

    @classmethod
    def uniform(cls, shape):
        return cls(np.full(shape, 1.0 / np.prod(shape)))

    @property
    def shape(self):
        return self.weights.shape

    @property
    def damped(self):
        return self.damping > 0


def as_weights(measure):
    return measure.weights if isinstance(measure, StateActionMeasure) else np.asarray(measure, float)


def _one_step(mdp, policy, mu):
    state_mass = mu.ravel() @ mdp.transition.reshape(-1, mdp.n_states)
    return state_mass[:, None] * policy


def stationarity_residual(mdp: TabularMdp, policy, mu):
    """L1 norm of ``mu M - mu`` for the state-action chain of ``policy``."""
    mu = as_weights(mu)
    return float(np.abs(_one_step(mdp, np.asarray(policy, float), mu) - mu).sum())


def stationary_distribution(mdp: TabularMdp, policy, tol=1e-12, max_iter=100_000,
                            damping=0.0, init=None, lazy=False):
    """Stationary state-action distribution by power iteration.

    Iterates from the uniform measure (or ``init``) until the L1 stationarity
    residual is at most ``tol``. With ``damping = d > 0`` each step mixes a
    fraction ``d`` of uniform mass in; the result is then stationary for the
    damped chain and carries ``damping`` so callers can label it.

    ``lazy=True`` iterates the lazy chain ``(I + M) / 2`` instead, which has
    the same stationary measures but no periodicity.
    """
    if not tol > 0:
        raise InvalidSpecError("tol must be positive")
    if not 0.0 <= damping <= 1.0:
        raise InvalidSpecError("damping must lie in [0, 1]")
    policy = np.asarray(policy, dtype=float)
    if policy.shape != mdp.shape:
        raise DimensionError("policy shape does not match MDP")
    uniform = np.full(mdp.shape, 1.0 / policy.size)
    mu = uniform.copy() if init is None else as_weights(init).copy()
    mu /= mu.sum()
    residual = np.inf
    for it in range(1, max_iter + 1):
        nxt = _one_step(mdp, policy, mu)
        if lazy:
            nxt = 0.5 * (nxt + mu)
        if damping > 0:
            nxt = (1.0 - damping) * nxt + damping * uniform
        nxt_sum = nxt.sum()
        if not nxt_sum > 0:
            raise NonConvergenceError("power iteration lost all mass", np.inf, it)
        nxt /= nxt_sum
        residual = np.abs(nxt - mu).sum()
        mu = nxt
        if residual <= tol:
            # report the residual of the returned measure itself
            check = _one_step(mdp, policy, mu)
            if damping > 0:
                check = (1.0 - damping) * check + damping * uniform
            final = float(np.abs(check - mu).sum())
            if final <= tol:
                mu = np.clip(mu, 0.0, None)
                return StateActionMeasure(mu / mu.sum(), damping=damping,
                                          residual=final, iterations=it)
            if abs(check.sum() - 1.0) > tol:
                raise NonConvergenceError("chain does not conserve mass (transition rows "
                                          "are not distributions)", final, it)
    raise NonConvergenceError("stationary power iteration did not converge", residual, max_iter)


def weighted_l2_norm(f, measure):
    f = np.asarray(f, dtype=float)
    w = as_weights(measure)
    if f.shape != w.shape:
        raise DimensionError(f"shape {f.shape} does not match measure {w.shape}")
    return float(np.sqrt(np.sum(w * f * f)))


def weighted_inner(f, g, measure):
    return float(np.sum(as_weights(measure) * np.asarray(f) * np.asarray(g)))


@dataclass(frozen=True, eq=False)
class DensityRatio:
    ratio: np.ndarray
    support_violations: int = 0

    def __post_init__(self):
        r = np.array(self.ratio, dtype=float)
        if np.any(r < 0):
            raise InvalidSpecError("density ratios must be nonnegative")
        r.setflags(write=False)
        object.__setattr__(self, "ratio", r)

    @classmethod
    def ones(cls, shape):
        return cls(np.ones(shape))


def density_ratio(numerator, denominator, floor=1e-12):
    """Entrywise ``numerator / denominator``; zero where the denominator is below ``floor``.

    Entries zeroed while the numerator still carries mass are counted as
    support violations.
    """
    num, den = as_weights(numerator), as_weights(denominator)
    if num.shape != den.shape:
        raise DimensionError("measures have different shapes")
    ok = den >= floor
    ratio = np.zeros_like(num)
    ratio[ok] = num[ok] / den[ok]
    violations = int(np.count_nonzero(~ok & (num > 0)))
    return DensityRatio(ratio, violations)


def reweight(ratio, base):
    """Normalized measure ``ratio * base``."""
    r = ratio.ratio if isinstance(ratio, DensityRatio) else np.asarray(ratio, float)
    return StateActionMeasure.from_unnormalized(r * as_weights(base))


def solve_normal_equations(gram, rhs, ridge=0.0):
    """Solve ``(gram + ridge I) theta = rhs`` for a symmetric PSD ``gram``."""
    if ridge < 0:
        raise InvalidSpecError("ridge must be nonnegative")
    p = gram.shape[0]
    a = gram + ridge * np.eye(p)
    a = 0.5 * (a + a.T)
    eig = linalg.eigvalsh(a)
    top = max(eig[-1], 0.0)
    if not eig[0] > 1e-13 * top or top == 0.0:
        hint = " (use ridge > 0)" if ridge == 0 else ""
        raise SingularDesignError(
            f"normal matrix is singular: eigenvalues in [{eig[0]:.3e}, {top:.3e}]{hint}")
    return linalg.solve(a, rhs, assume_a="pos")


def projection_weighted_ls(target, features, measure, ridge=0.0):
    """Weighted least-squares fit of ``target`` on the feature span.

    Returns a :class:`~softfqi.features.LinearQ`.
    """
    from .features import LinearQ

    w = as_weights(measure)
    target = np.asarray(target, dtype=float)
    phi = features.matrix
    if target.shape != features.table_shape or w.shape != features.table_shape:
        raise DimensionError("target, measure and features disagree on shape")
    y = target.ravel()
    wf = phi * w.ravel()[:, None]
    theta = solve_normal_equations(phi.T @ wf, wf.T @ y, ridge)
    return LinearQ(theta, features.ref)


def project(target, features, measure, ridge=0.0):
    """Projected table, i.e. ``features.evaluate(projection_weighted_ls(...))``."""
    return features.evaluate(projection_weighted_ls(target, features, measure, ridge))


def misspecification_gap(q_star, features, mu_star):
    proj = project(q_star, features, mu_star, ridge=0.0)
    return weighted_l2_norm(proj - np.asarray(q_star), mu_star)


@dataclass(frozen=True)
class ContractionProfile:
    """Local curvature constants around the soft optimum.

    ``rho(r) = gamma + beta_loc * r**alpha`` on the ball of radius ``r`` and
    ``r0`` is where that modulus reaches one.
    """

    beta_loc: float
    r0: float
    alpha: float
    pi_min: float
    c_inf: float
    eps_f: float
    gamma: float
    tau: float
    n_actions: int

    def rho(self, r):
        return self.gamma + self.beta_loc * np.power(r, self.alpha)

    def rho_eff(self, r):
        return self.gamma + self.beta_loc * np.power(r + self.eps_f, self.alpha)

    @property
    def r_max(self):
        return self.r0 - self.eps_f


def _radius(gamma, beta, alpha):
    if beta == 0:
        return np.inf
    return ((1.0 - gamma) / beta) ** (1.0 / alpha)


def contraction_profile(mdp: TabularMdp, tau, mu_star, pi_star, eps_f=0.0, alpha=1.0):
    """Curvature constant, contraction radius and modulus with ``C_inf = 1/sqrt(min mu_star)``."""
    mu = as_weights(mu_star)
    pi = check_policy(pi_star, *mdp.shape)
    if mu.shape != mdp.shape:
        raise DimensionError("measure does not match MDP")
    if not mu.min() > 0:
        raise DegenerateSupportError(
            f"{int(np.count_nonzero(mu <= 0))} state-action pairs carry zero stationary mass")
    state_mass = mu.sum(axis=1)
    pi_min = float(pi[state_mass > 0].min())
    c_inf = 1.0 / np.sqrt(mu.min())
    gamma = mdp.discount
    beta = gamma / (2.0 * tau) * c_inf * np.sqrt(mdp.n_actions / pi_min)
    return ContractionProfile(beta_loc=float(beta), r0=float(_radius(gamma, beta, alpha)),
                              alpha=float(alpha), pi_min=pi_min, c_inf=float(c_inf),
                              eps_f=float(eps_f), gamma=gamma, tau=float(tau),
                              n_actions=mdp.n_actions)


def gap_enhanced_profile(profile: ContractionProfile, action_gap, c_gap, r_gap):
    """Replace the curvature constant by its action-gap version and cap the radius at ``r_gap``."""
    if not action_gap > 0:
        raise NoGapError(f"action gap must be positive, got {action_gap}")
    p = profile
    beta = (p.gamma / p.tau * p.c_inf * np.sqrt(p.n_actions / p.pi_min)
            * c_gap * np.exp(-action_gap / (2.0 * p.tau)))
    r0 = min(r_gap, _radius(p.gamma, beta, p.alpha))
    return replace(p, beta_loc=float(beta), r0=float(r0))
