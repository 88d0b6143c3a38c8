"""Declarative experiment configuration (YAML, schema version 1).

A config file describes shared settings plus a list of ``arms``; each arm
overrides any top-level key (typically ``weighting`` and ``homotopy``) and
becomes one :class:`ExperimentConfig`. Example::

    version: 1
    name: garnet-desk
    output_dir: runs/garnet-desk
    seeds: {start: 0, count: 20}
    garnet: {n_states: 50, n_actions: 4, branching: 5, reward_std: 0.1, discount: 0.99}
    tau_target: 1.0e-6
    iters: 300
    ridge: 1.0e-10
    features: {kind: realizable, p: 5}
    mode: {kind: fitted, n_transitions: 100000}
    init: {kind: zero}
    arms:
      - name: fqi
        weighting: {kind: behavior}
      - name: sw-fqi
        weighting: {kind: stationary_exact}

``homotopy`` takes ``tau_init``, ``stages``, ``iters_per_stage`` and
``decay``; iterations left in the ``iters`` budget after the staged part
continue at ``tau_target``. The environment variables ``SOFTFQI_OUTPUT_DIR``
and ``SOFTFQI_WORKERS`` override the output directory and the worker count.
"""

import copy
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import ConfigError, SoftFqiError
from .fqi import HomotopySchedule, WeightingMode
from .mdp import GarnetSpec

CONFIG_VERSION = 1
TOP_KEYS = {"version", "name", "output_dir", "seeds", "garnet", "tau_target", "iters", "ridge",
            "features", "mode", "init", "weighting", "homotopy", "arms", "warm_start_iters",
            "feature_measure"}


@dataclass(frozen=True)
class FeatureSpec:
    kind: str = "realizable"  # or "one_hot"
    p: int = 5


@dataclass(frozen=True)
class ModeSpec:
    kind: str = "population"  # or "fitted"
    n_transitions: int = 0

    @property
    def fitted(self):
        return self.kind == "fitted"


@dataclass(frozen=True)
class InitSpec:
    kind: str = "zero"  # or "basin"
    delta: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "run"
    garnet: GarnetSpec = field(default_factory=GarnetSpec)
    tau_target: float = 1e-6
    homotopy: HomotopySchedule = None
    weighting: WeightingMode = field(default_factory=WeightingMode)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    mode: ModeSpec = field(default_factory=ModeSpec)
    iters: int = 300
    seeds: tuple = (0,)
    init: InitSpec = field(default_factory=InitSpec)
    ridge: float = 0.0
    output_dir: str = "runs"
    warm_start_iters: int = 0
    feature_measure: str = "stationary"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")
        if self.features.kind not in ("realizable", "one_hot"):
            raise ConfigError(f"unknown features kind {self.features.kind!r}")
        if self.features.kind == "realizable" and self.features.p < 2:
            raise ConfigError("realizable features need p >= 2")
        if self.mode.kind not in ("population", "fitted"):
            raise ConfigError(f"unknown mode {self.mode.kind!r}")
        if self.mode.fitted and self.mode.n_transitions < 1:
            raise ConfigError("fitted mode needs n_transitions >= 1")
        if self.init.kind not in ("zero", "basin"):
            raise ConfigError(f"unknown init {self.init.kind!r}")
        if self.feature_measure not in ("stationary", "uniform"):
            raise ConfigError("feature_measure must be 'stationary' or 'uniform'")
        if self.ridge < 0:
            raise ConfigError("ridge must be nonnegative")
        if self.homotopy is not None:
            if self.homotopy.tau_target != self.tau_target:
                raise ConfigError("homotopy must end at tau_target")
            if self.homotopy.total_iters != self.iters:
                raise ConfigError("homotopy stages exceed the iteration budget")

    def with_seeds(self, seeds):
        return replace(self, seeds=tuple(seeds))

    def to_dict(self):
        d = {
            "name": self.name,
            "garnet": {k: getattr(self.garnet, k) for k in
                       ("n_states", "n_actions", "branching", "reward_std", "discount")},
            "tau_target": self.tau_target,
            "weighting": {"kind": self.weighting.kind, "noise_scale": self.weighting.noise_scale,
                          "refresh_period": self.weighting.refresh_period},
            "features": {"kind": self.features.kind, "p": self.features.p},
            "mode": {"kind": self.mode.kind, "n_transitions": self.mode.n_transitions},
            "iters": self.iters,
            "seeds": list(self.seeds),
            "init": {"kind": self.init.kind, "delta": self.init.delta},
            "ridge": self.ridge,
            "warm_start_iters": self.warm_start_iters,
            "feature_measure": self.feature_measure,
            "homotopy": None,
        }
        if self.homotopy is not None:
            h = self.homotopy
            d["homotopy"] = {"tau_init": h.tau_init, "stages": h.stages,
                             "iters_per_stage": h.iters_per_stage, "decay": h.decay,
                             "final_iters": h.final_iters}
        return d


def _seeds(raw):
    if isinstance(raw, int):
        return (raw,)
    if isinstance(raw, dict):
        start, count = int(raw.get("start", 0)), int(raw["count"])
        return tuple(range(start, start + count))
    if isinstance(raw, (list, tuple)):
        return tuple(int(s) for s in raw)
    raise ConfigError(f"cannot read seeds from {raw!r}")


def _weighting(raw):
    raw = dict(raw or {"kind": "behavior"})
    kind = raw.pop("kind", "behavior")
    if kind == "fixed":
        raise ConfigError("fixed weighting is only available through the library API")
    return WeightingMode(kind, noise_scale=float(raw.pop("noise_scale", 0.0)),
                         refresh_period=int(raw.pop("refresh_period", 1)))


def _build(raw):
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    g = dict(raw.get("garnet") or {})
    garnet = GarnetSpec(int(g.get("n_states", 50)), int(g.get("n_actions", 4)),
                        int(g.get("branching", 5)), float(g.get("reward_std", 0.1)),
                        float(g.get("discount", 0.99)), 0)
    tau = float(raw.get("tau_target", 1e-6))
    iters = int(raw.get("iters", 300))
    homotopy = None
    if raw.get("homotopy"):
        h = dict(raw["homotopy"])
        stages, per = int(h.get("stages", 10)), int(h.get("iters_per_stage", 20))
        homotopy = HomotopySchedule(float(h["tau_init"]), tau, stages, per,
                                    h.get("decay", "geometric"), iters - stages * per)
    f = dict(raw.get("features") or {})
    m = dict(raw.get("mode") or {})
    i = dict(raw.get("init") or {})
    output_dir = os.environ.get("SOFTFQI_OUTPUT_DIR") or raw.get("output_dir", "runs")
    return ExperimentConfig(
        name=str(raw.get("name", "run")),
        garnet=garnet,
        tau_target=tau,
        homotopy=homotopy,
        weighting=_weighting(raw.get("weighting")),
        features=FeatureSpec(f.get("kind", "realizable"), int(f.get("p", 5))),
        mode=ModeSpec(m.get("kind", "population"), int(m.get("n_transitions", 0))),
        iters=iters,
        seeds=_seeds(raw.get("seeds", 0)),
        init=InitSpec(i.get("kind", "zero"), float(i.get("delta", 0.0))),
        ridge=float(raw.get("ridge", 0.0)),
        output_dir=str(output_dir),
        warm_start_iters=int(raw.get("warm_start_iters", 0)),
        feature_measure=raw.get("feature_measure", "stationary"),
    )


def configs_from_dict(doc):
    """Expand a parsed config document into one :class:`ExperimentConfig` per arm."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {doc.get('version')!r}")
    arms = doc.get("arms") or [{}]
    base = {k: v for k, v in doc.items() if k != "arms"}
    out = []
    try:
        for arm in arms:
            merged = copy.deepcopy(base)
            merged.update(arm)
            if "name" not in arm and len(arms) > 1:
                raise ConfigError("every arm needs a name")
            out.append(_build(merged))
    except ConfigError:
        raise
    except (SoftFqiError, TypeError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise ConfigError(f"arm names must be unique: {names}")
    return out


def load_config(path):
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return configs_from_dict(doc)


def workers_from_env(default=1):
    raw = os.environ.get("SOFTFQI_WORKERS")
    return max(1, int(raw)) if raw else default
