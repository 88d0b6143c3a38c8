"""Soft Bellman operators, exact soft value iteration and operator derivatives.

Q-tables are plain ``(n_states, n_actions)`` float arrays; policies are
row-stochastic arrays of the same shape. Entropies use the natural log.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, InvalidSpecError, NonConvergenceError
from .mdp import TabularMdp


def check_tau(tau):
    tau = float(tau)
    if not tau > 0 or not np.isfinite(tau):
        raise InvalidSpecError(f"temperature must be positive and finite, got {tau}")
    return tau


def _check_table(mdp, *tables):
    for t in tables:
        if np.shape(t) != mdp.shape:
            raise DimensionError(f"table shape {np.shape(t)} does not match MDP {mdp.shape}")


def softmax_policy(q, tau):
    q = np.asarray(q, dtype=float)
    tau = check_tau(tau)
    z = np.exp((q - q.max(axis=-1, keepdims=True)) / tau)
    return z / z.sum(axis=-1, keepdims=True)


def logsumexp_backup(v, tau):
    """Soft maximum ``tau * log sum_a exp(v_a / tau)`` of a single row."""
    v = np.asarray(v, dtype=float)
    tau = check_tau(tau)
    m = v.max()
    return m + tau * np.log(np.exp((v - m) / tau).sum())


def soft_value(q, tau):
    """Row-wise :func:`logsumexp_backup`; returns a vector over states."""
    q = np.asarray(q, dtype=float)
    tau = check_tau(tau)
    m = q.max(axis=-1)
    return m + tau * np.log(np.exp((q - m[..., None]) / tau).sum(axis=-1))


def soft_bellman_apply(mdp: TabularMdp, q, tau):
    _check_table(mdp, q)
    return mdp.reward + mdp.discount * mdp.expect_next(soft_value(q, tau))


def soft_eval_apply(mdp: TabularMdp, policy, f):
    """Next-state expectation of ``f`` with next actions drawn from ``policy``."""
    _check_table(mdp, policy, f)
    return mdp.expect_next((np.asarray(policy) * np.asarray(f)).sum(axis=1))


def policy_entropy(policy):
    policy = np.asarray(policy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(policy > 0, policy * np.log(policy), 0.0)
    return -terms.sum(axis=-1)


def entropy_bonus(mdp: TabularMdp, q, tau):
    _check_table(mdp, q)
    tau = check_tau(tau)
    h = policy_entropy(softmax_policy(q, tau))
    return mdp.discount * mdp.expect_next(tau * h)


def soft_eval_operator(mdp: TabularMdp, q, tau, f):
    """Policy-evaluation operator of ``softmax_policy(q)`` with its soft reward, applied to ``f``.

    With ``f = q`` this reproduces :func:`soft_bellman_apply`.
    """
    pi = softmax_policy(q, tau)
    return (mdp.reward + entropy_bonus(mdp, q, tau)
            + mdp.discount * soft_eval_apply(mdp, pi, f))


@dataclass
class SoftSolveReport:
    q_star: np.ndarray
    iterations: int
    final_residual: float


def solve_soft_q_star(mdp: TabularMdp, tau, tol=1e-10, max_iter=100_000, q0=None):
    """Soft value iteration from ``q0`` (zeros by default).

    Stops once the sup-norm step is at most ``tol * (1 - gamma) / gamma``,
    which bounds the distance to the fixed point by ``tol``.
    """
    if not tol > 0:
        raise InvalidSpecError("tol must be positive")
    tau = check_tau(tau)
    gamma = mdp.discount
    q = np.zeros(mdp.shape) if q0 is None else np.array(q0, dtype=float)
    _check_table(mdp, q)
    step_tol = tol * (1.0 - gamma) / gamma if gamma > 0 else np.inf
    step = np.inf
    for it in range(1, max_iter + 1):
        tq = soft_bellman_apply(mdp, q, tau)
        step = np.abs(tq - q).max()
        q = tq
        if step <= step_tol:
            residual = np.abs(soft_bellman_apply(mdp, q, tau) - q).max()
            return SoftSolveReport(q, it, float(residual))
    raise NonConvergenceError("soft value iteration did not converge", step, max_iter)


def dT_apply(mdp: TabularMdp, q, tau, h):
    """Frechet derivative of the soft Bellman operator at ``q`` in direction ``h``."""
    _check_table(mdp, q, h)
    return mdp.discount * soft_eval_apply(mdp, softmax_policy(q, tau), h)


def d2T_apply(mdp: TabularMdp, q, tau, h1, h2):
    """Second derivative: discounted next-state policy covariance of ``h1``, ``h2`` over ``tau``."""
    _check_table(mdp, q, h1, h2)
    tau = check_tau(tau)
    pi = softmax_policy(q, tau)
    c1 = h1 - (pi * h1).sum(axis=1, keepdims=True)
    c2 = h2 - (pi * h2).sum(axis=1, keepdims=True)
    cov = (pi * c1 * c2).sum(axis=1)
    return mdp.discount * mdp.expect_next(cov / tau)


def soft_value_increment(q, delta, tau):
    """``soft_value(q + delta) - soft_value(q)`` without cancellation for small ``delta``.

    A first pass centers at ``c = tau * log sum_a pi_a exp(delta_a / tau)``
    computed in the log domain; the second pass adds the correction
    ``tau * log1p(sum_a pi_a expm1((delta_a - c) / tau))``, which resolves
    increments far below the ulp of ``q``.
    """
    tau = check_tau(tau)
    q = np.asarray(q, dtype=float)
    delta = np.asarray(delta, dtype=float)
    z = (q - q.max(axis=-1, keepdims=True)) / tau
    log_pi = z - logsumexp(z, axis=-1, keepdims=True)
    pi = np.exp(log_pi)
    x = log_pi + delta / tau
    c = tau * logsumexp(x, axis=-1, keepdims=True)
    arg = (delta - c) / tau
    safe = pi > 1e-300
    with np.errstate(over="ignore", invalid="ignore"):
        terms = np.where(safe, pi * np.expm1(np.where(safe, arg, 0.0)), np.exp(x - c / tau))
    out = (c + tau * np.log1p(terms.sum(axis=-1, keepdims=True)))[..., 0]
    # shift covariance makes constant rows exact (in particular delta = 0 gives 0)
    const = np.all(delta == delta[..., :1], axis=-1)
    return np.where(const, delta[..., 0], out)


def soft_bellman_increment(mdp: TabularMdp, q, delta, tau):
    """``T(q + delta) - T(q)``, accurate when ``delta`` is tiny relative to ``q``."""
    _check_table(mdp, q, delta)
    return mdp.discount * mdp.expect_next(soft_value_increment(q, delta, tau))
