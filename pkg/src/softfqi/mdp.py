"""Finite MDPs, Garnet generation, behavior policies and reset-style datasets."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidSpecError
from .rng import stream

ROW_TOL = 1e-12


def check_policy(probs, n_states=None, n_actions=None):
    """Validate a policy table ``probs[s, a]`` and return it as a float array."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2:
        raise DimensionError(f"policy must be 2-d, got shape {probs.shape}")
    if n_states is not None and probs.shape != (n_states, n_actions):
        raise DimensionError(f"policy shape {probs.shape} != ({n_states}, {n_actions})")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL):
        raise InvalidSpecError("policy rows must be probability distributions")
    return probs


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Discounted finite MDP with dense ``transition[s, a, s']`` and ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))
        if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
            raise DimensionError(f"inconsistent shapes P{P.shape}, r{r.shape}")
        if self.validate:
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > ROW_TOL):
                raise InvalidSpecError("transition rows must be probability distributions")
            if not np.all(np.isfinite(r)):
                raise InvalidSpecError("rewards must be finite")
            if not 0.0 <= self.discount < 1.0:
                raise InvalidSpecError(f"discount must lie in [0, 1), got {self.discount}")
        P.setflags(write=False)
        r.setflags(write=False)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    @property
    def shape(self):
        return self.reward.shape

    def expect_next(self, v):
        """Return ``sum_s' P(s'|s,a) v(s')`` as an ``(S, A)`` table."""
        S, A = self.shape
        return (self.transition.reshape(S * A, S) @ v).reshape(S, A)


@dataclass(frozen=True)
class GarnetSpec:
    n_states: int = 50
    n_actions: int = 4
    branching: int = 5
    reward_std: float = 0.1
    discount: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1 or self.branching < 1:
            raise InvalidSpecError("n_states, n_actions and branching must be positive")
        if self.branching > self.n_states:
            raise InvalidSpecError(
                f"branching ({self.branching}) exceeds n_states ({self.n_states})")
        if self.reward_std < 0:
            raise InvalidSpecError("reward_std must be nonnegative")
        if not 0.0 <= self.discount < 1.0:
            raise InvalidSpecError("discount must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpecError("seed must be a 64-bit unsigned integer")


def generate_garnet(spec: GarnetSpec) -> TabularMdp:
    """Draw a Garnet MDP.

    Each (s, a) gets ``branching`` distinct successors chosen uniformly without
    replacement; their probabilities are the spacings of ``branching - 1``
    sorted uniforms on [0, 1]. Rewards are i.i.d. N(0, reward_std**2), fixed
    per (s, a).
    """
    S, A, b = spec.n_states, spec.n_actions, spec.branching
    rng = stream("garnet", spec.seed)
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            succ = rng.choice(S, size=b, replace=False)
            cuts = np.sort(rng.uniform(size=b - 1))
            probs = np.diff(np.concatenate(([0.0], cuts, [1.0])))
            P[s, a, succ] = probs
    # spacings can be exactly zero only with probability zero; renormalize
    # to absorb the last-ulp drift of np.diff
    P /= P.sum(axis=2, keepdims=True)
    reward = rng.normal(0.0, spec.reward_std, size=(S, A))
    return TabularMdp(P, reward, spec.discount)


def dirichlet_behavior_policy(mdp: TabularMdp, seed: int) -> np.ndarray:
    """Behavior policy with each state's row drawn from a flat Dirichlet."""
    rng = stream("behavior", seed)
    probs = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return probs / probs.sum(axis=1, keepdims=True)


def behavior_measure(mdp: TabularMdp, behavior) -> np.ndarray:
    """Reset-sampling distribution: uniform state times behavior action."""
    behavior = check_policy(behavior, *mdp.shape)
    return behavior / mdp.n_states


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """One-step transitions stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        cols = [np.asarray(self.states, dtype=np.int64), np.asarray(self.actions, dtype=np.int64),
                np.asarray(self.rewards, dtype=float), np.asarray(self.next_states, dtype=np.int64)]
        if len({c.shape for c in cols}) != 1 or cols[0].ndim != 1:
            raise DimensionError("dataset columns must be 1-d and of equal length")
        for name, c in zip(("states", "actions", "rewards", "next_states"), cols):
            c.setflags(write=False)
            object.__setattr__(self, name, c)

    @property
    def n(self):
        return self.states.shape[0]

    def __len__(self):
        return self.n

    def check_bounds(self, n_states, n_actions):
        ok = (self.states.min(initial=0) >= 0 and self.states.max(initial=0) < n_states
              and self.next_states.min(initial=0) >= 0
              and self.next_states.max(initial=0) < n_states
              and self.actions.min(initial=0) >= 0 and self.actions.max(initial=0) < n_actions)
        if not ok:
            raise DimensionError("dataset indices out of range")

    @property
    def records(self):
        return list(zip(self.states.tolist(), self.actions.tolist(),
                        self.rewards.tolist(), self.next_states.tolist()))


def _inverse_cdf(cdf_rows, u):
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def sample_reset_dataset(mdp: TabularMdp, behavior, n: int, seed: int) -> TransitionDataset:
    """Sample ``n`` transitions: s ~ Uniform(S), a ~ behavior(.|s), s' ~ P(.|s,a)."""
    if n < 1:
        raise InvalidSpecError("n must be at least 1")
    behavior = check_policy(behavior, *mdp.shape)
    rng = stream("dataset", seed)
    S = mdp.n_states
    states = rng.integers(0, S, size=n)
    actions = _inverse_cdf(np.cumsum(behavior, axis=1)[states], rng.uniform(size=n))
    cdf = np.cumsum(mdp.transition, axis=2)
    next_states = _inverse_cdf(cdf[states, actions], rng.uniform(size=n))
    rewards = mdp.reward[states, actions]
    return TransitionDataset(states, actions, rewards, next_states)
