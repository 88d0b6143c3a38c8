import functools

import numpy as np
import pytest

from softfqi.fqi import robust_stationary
from softfqi.mdp import GarnetSpec, TabularMdp, generate_garnet
from softfqi.soft_bellman import softmax_policy, solve_soft_q_star

REFERENCE_SEEDS = tuple(range(10))


@functools.lru_cache(maxsize=None)
def garnet(seed, n_states=50, n_actions=4, branching=5, discount=0.99):
    return generate_garnet(GarnetSpec(n_states, n_actions, branching, 0.1, discount, seed))


@functools.lru_cache(maxsize=None)
def reference(seed, tau, n_states=50, n_actions=4, branching=5):
    """(mdp, q_star, pi_star, mu_star) for a Garnet seed at temperature tau."""
    mdp = garnet(seed, n_states, n_actions, branching)
    q = solve_soft_q_star(mdp, tau, tol=1e-10).q_star
    pi = softmax_policy(q, tau)
    return mdp, q, pi, robust_stationary(mdp, pi)


def single_state_mdp(reward=1.0, discount=0.5, n_actions=1):
    return TabularMdp(np.ones((1, n_actions, 1)), np.full((1, n_actions), reward), discount)


def random_mdp(rng, n_states=4, n_actions=3, discount=0.9):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return TabularMdp(P, rng.normal(size=(n_states, n_actions)), discount)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance and echoed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
