"""Seed sweeps, aggregation, paired comparisons and the verification suite."""

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import diagnostics, io
from .config import ExperimentConfig, workers_from_env
from .errors import ConfigError, NonConvergenceError, SoftFqiError
from .features import LinearQ, build_realizable_features, one_hot_features
from .fqi import (WeightingMode, basin_init, robust_stationary, run_fqi, run_homotopy)
from .geometry import (StateActionMeasure, contraction_profile, project, stationarity_residual,
                       weighted_l2_norm)
from .mdp import (GarnetSpec, behavior_measure, dirichlet_behavior_policy, generate_garnet,
                  sample_reset_dataset)
from .soft_bellman import soft_bellman_apply, softmax_policy, solve_soft_q_star

log = logging.getLogger(__name__)

Q_STAR_TOL = 1e-10


class ExperimentError(SoftFqiError):
    pass


@dataclass
class Instance:
    """Everything derived from one seed that all arms share."""

    mdp: object
    behavior: np.ndarray
    nu_b: StateActionMeasure
    dataset: object
    q_star: np.ndarray
    mu_star: StateActionMeasure
    features: object
    completeness_gap: float
    references: dict = field(default_factory=dict)


_CACHE = {}
_CACHE_SIZE = 4


def _instance_key(config: ExperimentConfig, seed):
    g = config.garnet
    return (g.n_states, g.n_actions, g.branching, g.reward_std, g.discount, int(seed),
            config.tau_target, config.features, config.mode.n_transitions if config.mode.fitted
            else 0, config.feature_measure)


def build_instance(config: ExperimentConfig, seed):
    key = _instance_key(config, seed)
    if key in _CACHE:
        return _CACHE[key]
    g = config.garnet
    mdp = generate_garnet(GarnetSpec(g.n_states, g.n_actions, g.branching, g.reward_std,
                                     g.discount, int(seed)))
    behavior = dirichlet_behavior_policy(mdp, seed)
    nu_b = StateActionMeasure(behavior_measure(mdp, behavior))
    dataset = None
    if config.mode.fitted:
        dataset = sample_reset_dataset(mdp, behavior, config.mode.n_transitions, seed)
    tau = config.tau_target
    q_star = solve_soft_q_star(mdp, tau, tol=Q_STAR_TOL).q_star
    mu_star = robust_stationary(mdp, softmax_policy(q_star, tau))
    if config.features.kind == "one_hot":
        features = one_hot_features(mdp)
    else:
        basis_measure = mu_star if config.feature_measure == "stationary" else \
            StateActionMeasure.uniform(mdp.shape)
        features = build_realizable_features(q_star, config.features.p, seed, basis_measure)
    completeness = math.nan
    if features.p >= 2 and config.features.kind == "realizable":
        t_phi = soft_bellman_apply(mdp, features.features[:, :, 1], tau)
        completeness = weighted_l2_norm(t_phi - project(t_phi, features, mu_star), mu_star)
    inst = Instance(mdp, behavior, nu_b, dataset, q_star, mu_star, features, completeness)
    inst.references[tau] = (q_star, mu_star)
    if len(_CACHE) >= _CACHE_SIZE:
        _CACHE.pop(next(iter(_CACHE)))
    _CACHE[key] = inst
    return inst


@dataclass
class SeedResult:
    seed: int
    record: object
    info: dict


def path_max_error(record):
    """Largest squared error along the path, after the first temperature decrease.

    For single-stage runs this is the maximum over ``k >= 1``. Multi-stage
    runs skip the first stage, whose errors are dominated by the shared
    initial distance to the initial-temperature optimum.
    """
    e = np.asarray(record.error_sq)
    st = np.asarray(record.stage)
    if st.size and st.max() > 0:
        sel = e[st > st.min()]
    else:
        sel = e[1:]
    return float(sel.max()) if sel.size else float(e.max())


def run_seed(config: ExperimentConfig, seed):
    inst = build_instance(config, seed)
    mdp, features = inst.mdp, inst.features
    if config.init.kind == "basin":
        q0 = basin_init(features, inst.q_star, inst.mu_star, config.init.delta, seed)
    else:
        q0 = LinearQ(np.zeros(features.p), features.ref)
    common = dict(behavior_measure=inst.nu_b, dataset=inst.dataset, ridge=config.ridge, seed=seed)
    tau0 = config.homotopy.tau_init if config.homotopy else config.tau_target
    if config.warm_start_iters:
        if tau0 not in inst.references:
            q_ref = solve_soft_q_star(mdp, tau0, tol=Q_STAR_TOL).q_star
            inst.references[tau0] = (q_ref, robust_stationary(mdp, softmax_policy(q_ref, tau0)))
        q_ref, mu_ref = inst.references[tau0]
        _, q0 = run_fqi(mdp, q0, tau0, features, WeightingMode.behavior(),
                        config.warm_start_iters, q_star_ref=q_ref, mu_star=mu_ref,
                        return_theta=True, **common)
    if config.homotopy is not None:
        rec = run_homotopy(mdp, q0, config.homotopy, features, config.weighting,
                           references=inst.references, **common)
    else:
        try:
            profile = contraction_profile(mdp, config.tau_target, inst.mu_star,
                                          softmax_policy(inst.q_star, config.tau_target))
        except SoftFqiError:
            profile = None
        rec = run_fqi(mdp, q0, config.tau_target, features, config.weighting, config.iters,
                      q_star_ref=inst.q_star, mu_star=inst.mu_star, profile=profile, **common)
    info = {
        "final_error_sq": rec.error_sq[-1],
        "path_max_error_sq": path_max_error(rec),
        "diverged": rec.diverged,
        "completeness_violation": inst.completeness_gap,
        "damped_weight_solves": rec.damped_weights,
        "feature_rank": features.rank,
    }
    return SeedResult(int(seed), rec, info)


def _run_seed_safe(args):
    config, seed = args
    try:
        return run_seed(config, seed), None
    except (SoftFqiError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


@dataclass
class AggregateSummary:
    arm: str
    seeds_completed: list
    failures: dict
    divergences: int
    iterations: list
    mean: list
    q25: list
    q75: list
    counts: list
    final: dict
    stage_boundaries: list
    config: dict
    target_iteration: int = 0

    @property
    def partial(self):
        return bool(self.failures)

    def to_dict(self):
        return {
            "schema": "softfqi.summary", "version": io.SCHEMA_VERSION,
            "arm": self.arm, "config": self.config,
            "seeds_completed": self.seeds_completed,
            "failures": {str(k): v for k, v in self.failures.items()},
            "divergences": self.divergences, "final_error_sq": self.final,
            "stage_boundaries": self.stage_boundaries,
            "target_iteration": self.target_iteration,
            "per_iteration": {"iteration": self.iterations, "mean": self.mean,
                              "q25": self.q25, "q75": self.q75, "runs": self.counts},
        }

    def plot_rows(self):
        for i, k in enumerate(self.iterations):
            yield {"arm": self.arm, "iteration": k, "mean": self.mean[i],
                   "q25": self.q25[i], "q75": self.q75[i]}


def _stats(values):
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "median": float(np.median(v)),
            "q25": float(np.quantile(v, 0.25)), "q75": float(np.quantile(v, 0.75)),
            "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


def aggregate(config: ExperimentConfig, results, failures):
    if not results:
        raise ExperimentError(f"arm {config.name!r}: no seed completed ({failures})")
    length = max(len(r.record) for r in results)
    iters, mean, q25, q75, counts = [], [], [], [], []
    for k in range(length):
        vals = np.array([r.record.error_sq[k] for r in results if len(r.record) > k])
        iters.append(k)
        mean.append(float(vals.mean()))
        q25.append(float(np.quantile(vals, 0.25)))
        q75.append(float(np.quantile(vals, 0.75)))
        counts.append(int(vals.size))
    final = _stats([r.info["final_error_sq"] for r in results])
    final["path_max"] = _stats([r.info["path_max_error_sq"] for r in results])
    return AggregateSummary(
        arm=config.name, seeds_completed=[r.seed for r in results], failures=dict(failures),
        divergences=sum(r.record.diverged for r in results), iterations=iters, mean=mean,
        q25=q25, q75=q75, counts=counts, final=final,
        stage_boundaries=list(results[0].record.stage_boundaries), config=config.to_dict(),
        target_iteration=_target_iteration(results[0].record, config.tau_target))


def _target_iteration(record, tau_target):
    """First logged iteration whose temperature is the target one."""
    return next((k for k, t in zip(record.k, record.tau) if t == tau_target), 0)


@dataclass
class ArmResult:
    config: ExperimentConfig
    summary: AggregateSummary
    results: list

    def by_seed(self):
        return {r.seed: r for r in self.results}


def arm_dir(config):
    return Path(config.output_dir) / config.name


def run_experiment(config: ExperimentConfig, workers=None, persist=True):
    """Run every seed of one arm, aggregate, and persist CSV/JSON artifacts."""
    workers = workers_from_env() if workers is None else workers
    jobs = [(config, s) for s in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_seed_safe, jobs))
    else:
        outcomes = [_run_seed_safe(j) for j in jobs]
    results, failures = [], {}
    for (_, seed), (res, err) in zip(jobs, outcomes):
        if err is None:
            results.append(res)
        else:
            log.warning("arm %s seed %s failed: %s", config.name, seed, err)
            failures[int(seed)] = err
    summary = aggregate(config, results, failures)
    arm = ArmResult(config, summary, results)
    if persist:
        persist_arm(arm)
    return arm


def persist_arm(arm: ArmResult):
    out = arm_dir(arm.config)
    for r in arm.results:
        io.write_run_csv(out / "runs" / f"seed_{r.seed:06d}.csv", r.record,
                         f"{arm.config.name}/{r.seed}")
    doc = arm.summary.to_dict()
    doc["per_seed"] = {str(r.seed): r.info for r in arm.results}
    io.write_json(out / "summary.json", doc)
    io.write_csv(out / "plot_data.csv", io.PLOT_CSV_COLUMNS, arm.summary.plot_rows())
    return out


def run_suite(configs, workers=None, persist=True):
    """Run several arms; write a combined plot-data CSV under the first arm's output root."""
    arms = [run_experiment(c, workers=workers, persist=persist) for c in configs]
    if persist and arms:
        rows = [row for a in arms for row in a.summary.plot_rows()]
        io.write_csv(Path(configs[0].output_dir) / "plot_data.csv", io.PLOT_CSV_COLUMNS, rows)
    return arms


def compare_arms(arms, paired_seeds=True, workers=None):
    """Pair each arm with the first (baseline) arm seed by seed.

    ``arms`` may hold :class:`ArmResult` objects or configs (which are run).
    Reports mean per-iteration error ratios (arm / baseline), the fraction of
    seeds where the arm's final error is below the baseline's with a one-sided
    sign test, and the fraction where the baseline's path maximum exceeds the
    arm's.
    """
    arms = [a if isinstance(a, ArmResult) else run_experiment(a, workers=workers, persist=False)
            for a in arms]
    if len(arms) < 2:
        raise ConfigError("compare needs at least two arms")
    base = arms[0]
    if paired_seeds:
        for a in arms[1:]:
            if set(a.config.seeds) != set(base.config.seeds):
                raise ConfigError(f"arm {a.config.name!r} uses a different seed set than "
                                  f"{base.config.name!r}")
    report = {"schema": "softfqi.comparison", "version": io.SCHEMA_VERSION,
              "baseline": base.config.name, "comparisons": []}
    b_seeds = base.by_seed()
    for a in arms[1:]:
        a_seeds = a.by_seed()
        seeds = sorted(set(a_seeds) & set(b_seeds))
        if not seeds:
            raise ExperimentError(f"no common completed seeds for {a.config.name!r}")
        length = min(min(len(a_seeds[s].record), len(b_seeds[s].record)) for s in seeds)
        ratios = []
        for k in range(length):
            r = [a_seeds[s].record.error_sq[k] / b_seeds[s].record.error_sq[k]
                 if b_seeds[s].record.error_sq[k] > 0 else math.nan for s in seeds]
            ratios.append(float(np.mean(r)))
        fa = np.array([a_seeds[s].info["final_error_sq"] for s in seeds])
        fb = np.array([b_seeds[s].info["final_error_sq"] for s in seeds])
        pa = np.array([a_seeds[s].info["path_max_error_sq"] for s in seeds])
        pb = np.array([b_seeds[s].info["path_max_error_sq"] for s in seeds])
        wins, losses = int(np.sum(fa < fb)), int(np.sum(fa > fb))
        p_value = (stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
                   if wins + losses else 1.0)
        report["comparisons"].append({
            "arm": a.config.name, "seeds": seeds,
            "per_iteration_ratio_mean": ratios,
            "final": {"fraction_arm_better": wins / len(seeds), "wins": wins, "losses": losses,
                      "sign_test_p": float(p_value)},
            "path_max": {"fraction_baseline_exceeds": float(np.mean(pb > pa)),
                         "baseline_median": float(np.median(pb)),
                         "arm_median": float(np.median(pa))},
        })
    return report


# --- verification suite ----------------------------------------------------

VERIFY_CHECKS = ("first_derivative", "second_derivative", "contraction_certificate",
                 "remainder_bound", "stationarity", "projection_orthogonality")


def _verify_one(check, name, mdp, tau, seed):
    tol = diagnostics.TOLERANCES
    q = solve_soft_q_star(mdp, tau, tol=Q_STAR_TOL).q_star
    pi = softmax_policy(q, tau)
    if check == "stationarity":
        # the uniform policy exercises every transition row, so mass leaks show up
        uniform = np.full(mdp.shape, 1.0 / mdp.n_actions)
        value = max(stationarity_residual(mdp, p, robust_stationary(mdp, p)) for p in (pi, uniform))
        return value, tol["stationarity_l1"], value <= tol["stationarity_l1"]
    mu = robust_stationary(mdp, pi)
    if check == "first_derivative":
        value = diagnostics.check_first_derivative(mdp, q, tau, 20, seed=seed, measure=mu)
        return value, tol["first_derivative_rel"], value <= tol["first_derivative_rel"]
    if check == "second_derivative":
        value = diagnostics.check_second_derivative(mdp, q, tau, 20, seed=seed, measure=mu)
        return value, tol["second_derivative_rel"], value <= tol["second_derivative_rel"]
    features = build_realizable_features(q, min(5, q.size), seed, mu)
    if check == "projection_orthogonality":
        target = soft_bellman_apply(mdp, features.features[:, :, 1], tau)
        value = diagnostics.orthogonality_residual(target, features, mu)
        return value, tol["orthogonality"], value <= tol["orthogonality"]
    profile = contraction_profile(mdp, tau, mu, pi)
    if check == "contraction_certificate":
        cert = diagnostics.certify_contraction(mdp, tau, q, features, mu, 0.5 * profile.r0,
                                               200, seed, profile=profile)
        return cert.violations + cert.projected_violations, 0, cert.passed
    if check == "remainder_bound":
        value = diagnostics.check_remainder_bound(mdp, tau, q, mu, 100, seed=seed,
                                                  profile=profile)
        return value, 0.0, value <= 0.0
    raise ConfigError(f"unknown check {check!r}")


def verify_suite(checks=VERIFY_CHECKS, seeds=range(5), tau=0.5, garnet=None, instances=None):
    """Run the diagnostic checks on a reference block and return a pass/fail document.

    ``instances`` may supply ``(name, mdp)`` pairs instead of Garnet seeds.
    """
    checks = list(checks)
    unknown = set(checks) - set(VERIFY_CHECKS)
    if unknown:
        raise ConfigError(f"unknown checks: {sorted(unknown)}")
    doc = {"schema": "softfqi.verify", "version": io.SCHEMA_VERSION, "tau": tau,
           "results": [], "warnings": []}
    if not checks:
        msg = "empty check subset: nothing verified"
        warnings.warn(msg)
        doc["warnings"].append(msg)
    if instances is None:
        g = garnet or GarnetSpec()
        instances = [(f"garnet-{s}", generate_garnet(GarnetSpec(
            g.n_states, g.n_actions, g.branching, g.reward_std, g.discount, s))) for s in seeds]
    for idx, (name, mdp) in enumerate(instances):
        for check in checks:
            entry = {"check": check, "instance": name}
            try:
                value, tolerance, ok = _verify_one(check, name, mdp, tau, idx)
                entry |= {"value": value, "tolerance": tolerance, "passed": bool(ok)}
            except (SoftFqiError, ArithmeticError, ValueError, NonConvergenceError) as exc:
                entry |= {"value": None, "tolerance": None, "passed": False,
                          "error": f"{type(exc).__name__}: {exc}"}
            doc["results"].append(entry)
    doc["failed"] = sorted({f"{r['check']}@{r['instance']}" for r in doc["results"]
                            if not r["passed"]})
    doc["passed"] = not doc["failed"]
    return doc
