"""Population and fitted soft Q-iteration with stationary reweighting.

The weighted regressions use the density ratio of the current policy's
stationary distribution with respect to the behavior distribution, computed
exactly (tabular case) and optionally perturbed by multiplicative log-normal
noise to emulate ratio-estimation error.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidSpecError, NonConvergenceError
from .features import FeatureMap, LinearQ
from .geometry import (DensityRatio, StateActionMeasure, as_weights, density_ratio, project,
                       projection_weighted_ls, reweight, solve_normal_equations,
                       stationary_distribution, weighted_l2_norm)
from .mdp import TabularMdp, TransitionDataset
from .rng import stream
from .soft_bellman import soft_bellman_apply, soft_value, softmax_policy, solve_soft_q_star

DIVERGENCE_THRESHOLD = 1e6
WEIGHTING_KINDS = ("behavior", "stationary_exact", "stationary_noisy", "fixed")


@dataclass(frozen=True)
class WeightingMode:
    """How regression weights are chosen at each iteration.

    ``behavior`` uses unit weights (plain FQI), ``stationary_exact`` the exact
    stationary ratio of the current policy, ``stationary_noisy`` that ratio
    times ``exp(noise_scale * g)``, and ``fixed`` a constant ``ratio``.
    Stationary weights are recomputed every ``refresh_period`` iterations.
    """

    kind: str = "behavior"
    noise_scale: float = 0.0
    refresh_period: int = 1
    ratio: DensityRatio = None

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise InvalidSpecError(f"unknown weighting kind {self.kind!r}")
        if self.noise_scale < 0:
            raise InvalidSpecError("noise_scale must be nonnegative")
        if self.refresh_period < 1:
            raise InvalidSpecError("refresh_period must be >= 1")
        if self.kind == "fixed" and self.ratio is None:
            raise InvalidSpecError("fixed weighting needs a ratio")

    @classmethod
    def behavior(cls):
        return cls("behavior")

    @classmethod
    def stationary_exact(cls, refresh_period=1):
        return cls("stationary_exact", refresh_period=refresh_period)

    @classmethod
    def stationary_noisy(cls, noise_scale, refresh_period=1):
        return cls("stationary_noisy", noise_scale=noise_scale, refresh_period=refresh_period)

    @classmethod
    def fixed(cls, ratio):
        return cls("fixed", ratio=ratio)

    @property
    def stationary(self):
        return self.kind in ("stationary_exact", "stationary_noisy")


@dataclass(frozen=True)
class HomotopySchedule:
    """Temperature path ``tau_init -> tau_target`` over ``stages`` stages.

    The last stage runs at ``tau_target``; ``final_iters`` extra iterations
    at the target follow the staged part.
    """

    tau_init: float
    tau_target: float
    stages: int = 10
    iters_per_stage: int = 20
    decay: str = "geometric"
    final_iters: int = 0

    def __post_init__(self):
        if not self.tau_init >= self.tau_target > 0:
            raise InvalidSpecError("need tau_init >= tau_target > 0")
        if self.stages < 1 or self.iters_per_stage < 1 or self.final_iters < 0:
            raise InvalidSpecError("stages and iters_per_stage must be positive")
        if self.decay not in ("geometric", "linear"):
            raise InvalidSpecError(f"unknown decay {self.decay!r}")

    @property
    def taus(self):
        if self.stages == 1:
            return [float(self.tau_target)]
        t = np.linspace(0.0, 1.0, self.stages)
        if self.decay == "geometric":
            path = self.tau_init * (self.tau_target / self.tau_init) ** t
        else:
            path = self.tau_init + (self.tau_target - self.tau_init) * t
        path[-1] = self.tau_target
        return [float(x) for x in path]

    @property
    def total_iters(self):
        return self.stages * self.iters_per_stage + self.final_iters


@dataclass
class FqiRunRecord:
    """Per-iteration trace of one run.

    Row ``k`` describes iterate ``Q^(k)``: its stationary-norm error against
    the reference optimum of the temperature in force, and the weight error
    of the regression that produced ``Q^(k+1)`` (absent on the last row).
    """

    k: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    error: list = field(default_factory=list)
    weight_err: list = field(default_factory=list)
    in_basin: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    diverged: bool = False
    stage_boundaries: list = field(default_factory=list)
    damped_weights: int = 0

    def __len__(self):
        return len(self.k)

    @property
    def error_sq(self):
        return [e * e for e in self.error]

    @property
    def rho(self):
        """Lagged modulus ``e_k / e_{k-1}``; ``None`` at the first row of each stage."""
        out = []
        for i, e in enumerate(self.error):
            if i == 0 or self.stage[i] != self.stage[i - 1] or self.error[i - 1] == 0:
                out.append(None)
            else:
                out.append(e / self.error[i - 1])
        return out

    @property
    def final_error(self):
        return self.error[-1] if self.error else math.nan

    def errors(self):
        return np.asarray(self.error, dtype=float)

    def rows(self, run_id):
        rho = self.rho
        for i in range(len(self.k)):
            yield {
                "run_id": run_id,
                "k": self.k[i],
                "tau": self.tau[i],
                "error_sq": self.error[i] ** 2,
                "rho_k": rho[i],
                "weight_err": self.weight_err[i],
                "in_basin": self.in_basin[i],
            }


def population_step(mdp: TabularMdp, q, tau, features: FeatureMap, weight_measure, ridge=0.0):
    """Project the exact soft Bellman target ``T(q)`` onto the features under ``weight_measure``."""
    return projection_weighted_ls(soft_bellman_apply(mdp, q, tau), features, weight_measure, ridge)


def fitted_regression(states, actions, targets, weights, features: FeatureMap, ridge=0.0):
    """Solve ``min (1/n) sum w_i (y_i - phi(s_i, a_i) theta)^2 + ridge |theta|^2``."""
    A = features.table_shape[1]
    phi = features.matrix[np.asarray(states) * A + np.asarray(actions)]
    n = phi.shape[0]
    wphi = phi * (np.asarray(weights, dtype=float) / n)[:, None]
    theta = solve_normal_equations(phi.T @ wphi, wphi.T @ np.asarray(targets, float), ridge)
    return LinearQ(theta, features.ref)


def fitted_step(dataset: TransitionDataset, q, tau, features: FeatureMap, ratio, ridge=1e-10,
                discount=None):
    """One fitted soft-FQI regression on the empirical soft Bellman targets.

    ``ratio`` is a :class:`DensityRatio` (or table) evaluated at each sample's
    state-action pair; ``discount`` is the MDP's discount factor.
    """
    if dataset.n < 1:
        raise InvalidSpecError("empty dataset")
    if discount is None:
        raise InvalidSpecError("fitted_step needs the discount factor")
    r = ratio.ratio if isinstance(ratio, DensityRatio) else np.asarray(ratio, float)
    targets = dataset.rewards + discount * soft_value(q, tau)[dataset.next_states]
    weights = r[dataset.states, dataset.actions]
    return fitted_regression(dataset.states, dataset.actions, targets, weights, features, ridge)


def noisy_ratio(exact: DensityRatio, base, noise_scale, rng):
    """Multiply ``exact`` by ``exp(noise_scale * g)`` and renormalize against ``base``."""
    g = rng.standard_normal(exact.ratio.shape)
    return renormalize_ratio(exact.ratio * np.exp(noise_scale * g), base)


def renormalize_ratio(ratio, base):
    r = ratio.ratio if isinstance(ratio, DensityRatio) else np.asarray(ratio, float)
    total = float(np.sum(r * as_weights(base)))
    return DensityRatio(r / total if total > 0 else r)


def weight_error(used: DensityRatio, exact: DensityRatio, target_measure):
    """``|| used / exact - 1 ||`` in L2 of the exact stationary measure, on its support."""
    mu = as_weights(target_measure)
    w = exact.ratio
    mask = (mu > 0) & (w > 0)
    rel = used.ratio[mask] / w[mask] - 1.0
    return float(np.sqrt(np.sum(mu[mask] * rel * rel)))


def robust_stationary(mdp, policy, tol=1e-12, max_iter=20_000):
    """Stationary measure with a lazy-chain retry for periodic chains."""
    try:
        return stationary_distribution(mdp, policy, tol=tol, max_iter=max_iter)
    except NonConvergenceError:
        return stationary_distribution(mdp, policy, tol=tol, max_iter=20 * max_iter, lazy=True)


class _Runner:
    """Mutable state of one FQI run; stages of a homotopy share one runner."""

    def __init__(self, mdp, q0, features, weighting, behavior_measure, dataset, ridge, seed,
                 perturbations=None, stationary_tol=1e-12):
        self.mdp = mdp
        self.features = features
        self.weighting = weighting
        self.nu_b = as_weights(behavior_measure)
        if self.nu_b.shape != mdp.shape:
            raise InvalidSpecError("behavior measure does not match MDP")
        self.dataset = dataset
        if dataset is not None:
            dataset.check_bounds(*mdp.shape)
        self.ridge = ridge
        self.rng = stream("weight_noise", seed)
        self.perturbations = dict(perturbations or {})
        self.stationary_tol = stationary_tol
        self.theta = np.asarray(q0.theta if isinstance(q0, LinearQ) else q0, dtype=float)
        self.k = 0
        self.used = None
        self.record = FqiRunRecord()

    @property
    def q(self):
        return self.features.features @ self.theta

    def _weights(self, q, tau):
        """Return (used ratio, weight error) for the regression at iteration ``self.k``."""
        mode = self.weighting
        pi = softmax_policy(q, tau)
        mu_k = robust_stationary(self.mdp, pi, tol=self.stationary_tol)
        if mu_k.damped:
            self.record.damped_weights += 1
        exact = density_ratio(mu_k, self.nu_b)
        if mode.kind == "behavior":
            used = DensityRatio.ones(self.mdp.shape)
        elif mode.kind == "fixed":
            used = mode.ratio
        elif self.used is None or self.k % mode.refresh_period == 0:
            if mode.kind == "stationary_exact":
                used = exact
            else:
                used = noisy_ratio(exact, self.nu_b, mode.noise_scale, self.rng)
        else:
            used = self.used
        self.used = used
        if self.k in self.perturbations:
            used = renormalize_ratio(used.ratio * self.perturbations[self.k].ratio, self.nu_b)
        return used, weight_error(used, exact, mu_k)

    def _log(self, q, tau, q_ref, mu_ref, stage, profile, weight_err=None):
        with np.errstate(over="ignore"):
            err = weighted_l2_norm(q - q_ref, mu_ref) if np.all(np.isfinite(q)) else math.inf
        rec = self.record
        rec.k.append(self.k)
        rec.tau.append(float(tau))
        rec.error.append(err)
        rec.weight_err.append(weight_err)
        rec.in_basin.append(None if profile is None else bool(err <= profile.r_max))
        rec.stage.append(stage)
        if not err <= DIVERGENCE_THRESHOLD:
            rec.diverged = True
        return err

    def advance(self, tau, n_steps, q_ref, mu_ref, stage=0, profile=None):
        rec = self.record
        if rec.diverged:
            return rec
        if not rec.k:
            self._log(self.q, tau, q_ref, mu_ref, stage, profile)
            if rec.diverged:
                return rec
        else:
            rec.stage_boundaries.append(self.k + 1)
        for _ in range(n_steps):
            q = self.q
            with np.errstate(over="ignore", invalid="ignore"):
                used, werr = self._weights(q, tau)
                rec.weight_err[-1] = werr
                if self.dataset is None:
                    measure = reweight(used, self.nu_b)
                    step = population_step(self.mdp, q, tau, self.features, measure, self.ridge)
                else:
                    step = fitted_step(self.dataset, q, tau, self.features, used, self.ridge,
                                       discount=self.mdp.discount)
            self.theta = np.asarray(step.theta)
            self.k += 1
            self._log(self.q, tau, q_ref, mu_ref, stage, profile)
            if rec.diverged:
                break
        return rec


def _reference(mdp, tau, q_star_ref=None, mu_star=None, tol=1e-10):
    if q_star_ref is None:
        q_star_ref = solve_soft_q_star(mdp, tau, tol=tol).q_star
    if mu_star is None:
        mu_star = robust_stationary(mdp, softmax_policy(q_star_ref, tau))
    return np.asarray(q_star_ref, float), mu_star


def run_fqi(mdp, q0, tau, features, weighting, iters, *, behavior_measure, q_star_ref=None,
            mu_star=None, dataset=None, ridge=0.0, seed=0, profile=None, perturbations=None,
            return_theta=False):
    """Run ``iters`` soft FQI iterations at a fixed temperature.

    Population mode when ``dataset`` is None (exact targets, exact weighted
    projection), fitted mode otherwise. Errors are measured in L2(``mu_star``)
    against ``q_star_ref``; both are computed when not given. ``perturbations``
    maps an iteration index to a multiplicative :class:`DensityRatio` applied
    to that iteration's weights only.
    """
    if iters < 1:
        raise InvalidSpecError("iters must be >= 1")
    q_ref, mu_ref = _reference(mdp, tau, q_star_ref, mu_star)
    runner = _Runner(mdp, q0, features, weighting, behavior_measure, dataset, ridge, seed,
                     perturbations)
    rec = runner.advance(tau, iters, q_ref, mu_ref, profile=profile)
    return (rec, LinearQ(runner.theta, features.ref)) if return_theta else rec


def run_homotopy(mdp, q0, schedule: HomotopySchedule, features, weighting, *, behavior_measure,
                 dataset=None, ridge=0.0, seed=0, references=None, return_theta=False):
    """Soft FQI along a decreasing temperature path, warm-starting each stage.

    Each stage's errors are measured against that stage's exact soft optimum
    and stationary measure. ``references`` may map tau to a precomputed
    ``(q_star, mu_star)`` pair.
    """
    references = {} if references is None else references
    runner = _Runner(mdp, q0, features, weighting, behavior_measure, dataset, ridge, seed)
    taus = schedule.taus
    plan = [(i, t, schedule.iters_per_stage) for i, t in enumerate(taus)]
    if schedule.final_iters:
        plan.append((len(taus), taus[-1], schedule.final_iters))
    for stage, tau, n in plan:
        if tau not in references:
            references[tau] = _reference(mdp, tau)
        q_ref, mu_ref = references[tau]
        runner.advance(tau, n, q_ref, mu_ref, stage=stage)
        if runner.record.diverged:
            break
    rec = runner.record
    return (rec, LinearQ(runner.theta, features.ref)) if return_theta else rec


@dataclass
class PopulationContext:
    """Everything a population SW-FQI run needs, for repeated controlled runs."""

    mdp: TabularMdp
    tau: float
    features: FeatureMap
    q0: LinearQ
    iters: int
    behavior_measure: StateActionMeasure
    q_star: np.ndarray
    mu_star: StateActionMeasure
    ridge: float = 0.0


@dataclass
class InjectionResult:
    clean: FqiRunRecord
    perturbed: FqiRunRecord
    excess: np.ndarray  # e_k(perturbed) - e_k(clean)
    iterations: tuple


def inject_weight_errors(ctx: PopulationContext, perturbations):
    """Population SW-FQI with exact weights except at the iterations in ``perturbations``."""
    for j in perturbations:
        if not 0 <= j < ctx.iters:
            raise InvalidSpecError(f"perturbation index {j} outside [0, {ctx.iters})")
    kw = dict(behavior_measure=ctx.behavior_measure, q_star_ref=ctx.q_star,
              mu_star=ctx.mu_star, ridge=ctx.ridge)
    mode = WeightingMode.stationary_exact()
    clean = run_fqi(ctx.mdp, ctx.q0, ctx.tau, ctx.features, mode, ctx.iters, **kw)
    pert = run_fqi(ctx.mdp, ctx.q0, ctx.tau, ctx.features, mode, ctx.iters,
                   perturbations=perturbations, **kw)
    excess = pert.errors() - clean.errors()
    return InjectionResult(clean, pert, excess, tuple(sorted(perturbations)))


def inject_weight_error_once(ctx: PopulationContext, at_iteration, perturbation: DensityRatio):
    return inject_weight_errors(ctx, {at_iteration: perturbation})


def log_normal_perturbation(shape, scale, seed):
    """Multiplicative weight perturbation ``exp(scale * g)``; ``scale = 0`` gives ones."""
    g = stream("weight_noise", seed, 1).standard_normal(shape)
    return DensityRatio(np.exp(scale * g))


def basin_init(features: FeatureMap, q_star, mu_star, delta, seed):
    """``Pi_F(q_star + delta * u)`` for a random direction ``u`` of unit stationary norm."""
    rng = stream("init", seed)
    u = rng.standard_normal(np.shape(q_star))
    u /= weighted_l2_norm(u, mu_star)
    return projection_weighted_ls(np.asarray(q_star) + delta * u, features, mu_star)


def projected_fixed_point(mdp, tau, features, weight_fn, q0, tol=1e-12, max_iter=50_000,
                          ridge=0.0, norm_measure=None):
    """Picard iteration of ``q -> Pi T(q)`` until the stationary-norm step is below ``tol``.

    ``weight_fn(q)`` returns the projection measure for iterate ``q``.
    Returns ``(LinearQ, iterations, last step)``.
    """
    theta = np.asarray(q0.theta, float)
    step = math.inf
    for it in range(1, max_iter + 1):
        q = features.features @ theta
        new = population_step(mdp, q, tau, features, weight_fn(q), ridge)
        diff = features.features @ (new.theta - theta)
        measure = norm_measure if norm_measure is not None else weight_fn(q)
        step = weighted_l2_norm(diff, measure)
        theta = np.asarray(new.theta)
        if step <= tol:
            return LinearQ(theta, features.ref), it, step
    raise NonConvergenceError("projected Picard iteration did not converge", step, max_iter)


def stationary_weight_fn(mdp, tau):
    """Projection measure of SW-FQI: the stationary measure of ``softmax_policy(q)``."""
    return lambda q: robust_stationary(mdp, softmax_policy(q, tau))


__all__ = [
    "WeightingMode", "HomotopySchedule", "FqiRunRecord", "population_step", "fitted_step",
    "fitted_regression", "run_fqi", "run_homotopy", "PopulationContext", "InjectionResult",
    "inject_weight_error_once", "inject_weight_errors", "log_normal_perturbation",
    "basin_init", "projected_fixed_point", "stationary_weight_fn", "project",
]
