"""Command-line interface: ``softfqi {generate,solve,run,compare,verify,plot}``.

Exit codes: 0 success, 1 configuration error, 2 check failure (or a run with
no completed seed), 3 results aggregated over a partial set of seeds.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .config import load_config, workers_from_env
from .errors import ConfigError, SoftFqiError
from .experiment import (VERIFY_CHECKS, ExperimentError, arm_dir, compare_arms, run_suite,
                         verify_suite)
from .fqi import robust_stationary
from .mdp import GarnetSpec, dirichlet_behavior_policy, generate_garnet, sample_reset_dataset
from .soft_bellman import softmax_policy, solve_soft_q_star

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_PARTIAL = 0, 1, 2, 3
log = logging.getLogger("softfqi")


def _seed_list(text):
    """``"0:20"`` (half-open range) or ``"1,4,7"``."""
    try:
        if ":" in text:
            a, b = text.split(":")
            return tuple(range(int(a), int(b)))
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _add_garnet_flags(p):
    g = GarnetSpec()
    p.add_argument("--n-states", type=int, default=g.n_states)
    p.add_argument("--n-actions", type=int, default=g.n_actions)
    p.add_argument("--branching", type=int, default=g.branching)
    p.add_argument("--reward-std", type=float, default=g.reward_std)
    p.add_argument("--discount", type=float, default=g.discount)
    p.add_argument("--seed", type=int, default=0)


def _garnet_from_args(args):
    return GarnetSpec(args.n_states, args.n_actions, args.branching, args.reward_std,
                      args.discount, args.seed)


def _emit(line):
    print(line, flush=True)


def cmd_generate(args):
    mdp = generate_garnet(_garnet_from_args(args))
    out = Path(args.output)
    io.write_json(out / "mdp.json", io.mdp_to_json(mdp))
    _emit(f"mdp\t{out / 'mdp.json'}")
    if args.n_transitions:
        behavior = dirichlet_behavior_policy(mdp, args.seed)
        ds = sample_reset_dataset(mdp, behavior, args.n_transitions, args.seed)
        io.write_json(out / "behavior.json", io.qtable_to_json(behavior, kind="behavior_policy"))
        io.write_json(out / "dataset.json", io.dataset_to_json(ds))
        _emit(f"dataset\t{out / 'dataset.json'}\tn={ds.n}")
    return EXIT_OK


def cmd_solve(args):
    if args.mdp:
        try:
            mdp = io.mdp_from_json(io.read_json(args.mdp))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read MDP from {args.mdp}: {exc}") from exc
    else:
        mdp = generate_garnet(_garnet_from_args(args))
    rep = solve_soft_q_star(mdp, args.tau, tol=args.tol)
    mu = robust_stationary(mdp, softmax_policy(rep.q_star, args.tau))
    meta = {"tau": args.tau, "iterations": rep.iterations, "residual": rep.final_residual,
            "stationary_residual": mu.residual}
    _emit("tau,iterations,residual,stationary_residual")
    _emit(",".join(io.fmt(meta[k]) for k in ("tau", "iterations", "residual",
                                              "stationary_residual")))
    if args.output:
        doc = io.qtable_to_json(rep.q_star, **meta)
        doc["stationary"] = mu.weights.ravel().tolist()
        io.write_json(args.output, doc)
    return EXIT_OK


def _load(args):
    configs = load_config(args.config)
    if getattr(args, "arm", None):
        configs = [c for c in configs if c.name in args.arm]
        if not configs:
            raise ConfigError(f"no arm named {args.arm} in {args.config}")
    if getattr(args, "seeds", None):
        configs = [c.with_seeds(args.seeds) for c in configs]
    if getattr(args, "output_dir", None):
        configs = [replace(c, output_dir=args.output_dir) for c in configs]
    return configs


def _figure(configs, arms, path):
    from .plotting import plot_error_curves
    rows = [r for a in arms for r in a.summary.plot_rows()]
    marks = {a.config.name: a.summary.target_iteration for a in arms}
    return plot_error_curves(rows, path, marks, title=Path(configs[0].output_dir).name)


def _summary_lines(arms):
    _emit("arm,seeds_completed,failures,divergences,final_mean,final_median,final_q25,final_q75")
    for a in arms:
        s = a.summary
        f = s.final
        _emit(",".join([s.arm, str(len(s.seeds_completed)), str(len(s.failures)),
                        str(s.divergences)] + [io.fmt(f[k]) for k in
                                               ("mean", "median", "q25", "q75")]))


def cmd_run(args):
    configs = _load(args)
    arms = run_suite(configs, workers=args.workers)
    _summary_lines(arms)
    if args.figure != "none":
        fig = Path(args.figure) if args.figure else Path(configs[0].output_dir) / "errors.svg"
        _emit(f"figure\t{_figure(configs, arms, fig)}")
    return EXIT_PARTIAL if any(a.summary.partial for a in arms) else EXIT_OK


def cmd_compare(args):
    configs = _load(args)
    if len(configs) < 2:
        raise ConfigError("compare needs a config with at least two arms")
    arms = run_suite(configs, workers=args.workers)
    report = compare_arms(arms, paired_seeds=not args.unpaired)
    out = Path(args.output) if args.output else Path(configs[0].output_dir) / "comparison.json"
    io.write_json(out, report)
    _emit("baseline,arm,n_seeds,fraction_arm_better,sign_test_p,fraction_baseline_path_max_exceeds")
    for c in report["comparisons"]:
        _emit(",".join([report["baseline"], c["arm"], str(len(c["seeds"])),
                        io.fmt(c["final"]["fraction_arm_better"]),
                        io.fmt(c["final"]["sign_test_p"]),
                        io.fmt(c["path_max"]["fraction_baseline_exceeds"])]))
    _emit(f"report\t{out}")
    if args.figure != "none":
        fig = Path(args.figure) if args.figure else Path(configs[0].output_dir) / "errors.svg"
        _emit(f"figure\t{_figure(configs, arms, fig)}")
    return EXIT_PARTIAL if any(a.summary.partial for a in arms) else EXIT_OK


def cmd_verify(args):
    checks = VERIFY_CHECKS if args.checks is None else \
        [c for c in args.checks.split(",") if c]
    doc = verify_suite(checks, seeds=args.seeds or range(5), tau=args.tau)
    if args.output:
        io.write_json(args.output, doc)
    _emit("check,instance,value,tolerance,passed")
    for r in doc["results"]:
        _emit(",".join([r["check"], r["instance"], io.fmt(r["value"]), io.fmt(r["tolerance"]),
                        io.fmt(r["passed"])]))
    for w in doc["warnings"]:
        log.warning(w)
    for name in doc["failed"]:
        _emit(f"FAILED\t{name}")
    return EXIT_OK if doc["passed"] else EXIT_CHECK


def cmd_plot(args):
    from .plotting import plot_error_curves
    src = Path(args.input)
    try:
        rows = io.read_csv(src)
    except OSError as exc:
        raise ConfigError(f"cannot read {src}: {exc}") from exc
    if rows and set(io.PLOT_CSV_COLUMNS) - set(rows[0]):
        raise ConfigError(f"{src} is not a plot-data CSV")
    marks = {}
    for arm in {r["arm"] for r in rows}:
        summary = src.parent / arm / "summary.json"
        if not summary.exists():
            summary = src.parent / "summary.json"
        if summary.exists():
            doc = io.read_json(summary, "softfqi.summary")
            if doc["arm"] == arm:
                marks[arm] = doc.get("target_iteration", 0)
    out = Path(args.output) if args.output else src.with_suffix(".svg")
    _emit(f"figure\t{plot_error_curves(rows, out, marks, title=args.title, logy=not args.linear)}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="softfqi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a Garnet MDP (and optionally a dataset) as JSON")
    _add_garnet_flags(g)
    g.add_argument("--n-transitions", type=int, default=0)
    g.add_argument("-o", "--output", default=".")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve for the soft optimum Q* at one temperature")
    _add_garnet_flags(s)
    s.add_argument("--mdp", help="MDP JSON from 'generate' (overrides the Garnet flags)")
    s.add_argument("--tau", type=float, required=True)
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_solve)

    for name, func, hlp in (("run", cmd_run, "run every arm of a config"),
                            ("compare", cmd_compare, "run arms and compare them seed by seed")):
        r = sub.add_parser(name, help=hlp)
        r.add_argument("config")
        r.add_argument("--arm", action="append", help="restrict to this arm (repeatable)")
        r.add_argument("--seeds", type=_seed_list, help="override seeds, e.g. 0:20 or 1,2,3")
        r.add_argument("--output-dir")
        r.add_argument("--workers", type=int, default=None)
        r.add_argument("--figure", help="figure path (.svg/.png/.pdf) or 'none'")
        if name == "compare":
            r.add_argument("--unpaired", action="store_true")
            r.add_argument("-o", "--output", help="comparison JSON path")
        r.set_defaults(func=func)

    v = sub.add_parser("verify", help="run the diagnostic checks on a reference seed block")
    v.add_argument("--checks", help=f"comma-separated subset of {','.join(VERIFY_CHECKS)}")
    v.add_argument("--seeds", type=_seed_list)
    v.add_argument("--tau", type=float, default=0.5)
    v.add_argument("-o", "--output")
    v.set_defaults(func=cmd_verify)

    pl = sub.add_parser("plot", help="render a plot-data CSV")
    pl.add_argument("input")
    pl.add_argument("-o", "--output")
    pl.add_argument("--title")
    pl.add_argument("--linear", action="store_true", help="linear y axis")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = workers_from_env()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except SoftFqiError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ValueError) else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
