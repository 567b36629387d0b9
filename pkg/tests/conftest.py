import numpy as np
import pytest

from ccvl.data import build_empirical_model, collect_dataset
from ccvl.mdp import RandomMdpSpec, random_mdp, uniform_policy

ACCEPTANCE_LINES = []


def small_instance(seed, num_states=5, num_actions=2, discount=0.9, num_samples=300):
    """Random MDP plus a uniform-behavior dataset and its empirical model."""
    mdp = random_mdp(RandomMdpSpec(num_states, num_actions, discount, seed))
    data = collect_dataset(mdp, uniform_policy(num_states, num_actions), num_samples, 100, seed)
    return mdp, data, build_empirical_model(data, mdp.discount, mdp.r_max)


@pytest.fixture
def instance():
    return small_instance(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance_line():
    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
