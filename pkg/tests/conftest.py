import numpy as np
import pytest

from ope_lab.environments import (
    ContextFreePolicy,
    StateTablePolicy,
    TabularMDPSpec,
    reference_mdp,
)

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def ref():
    return reference_mdp()


@pytest.fixture
def short_ref():
    return reference_mdp(horizon=3)


def constant_chain(horizon=2, discount=1.0, reward=1.0):
    """One state, one action, deterministic reward."""
    spec = TabularMDPSpec(
        transition=np.ones((1, 1, 1)),
        reward_mean=np.full((1, 1), reward),
        initial_dist=np.ones(1),
        horizon=horizon,
        discount=discount,
        reward_noise_sd=0.0,
    )
    return spec, ContextFreePolicy(np.ones(1))


def one_state_binary(horizon=4, reward=(0.0, 1.0), noise=0.0, p1=0.3):
    spec = TabularMDPSpec(
        transition=np.ones((1, 2, 1)),
        reward_mean=np.array([reward]),
        initial_dist=np.ones(1),
        horizon=horizon,
        reward_noise_sd=noise,
    )
    return spec, StateTablePolicy(np.array([[1 - p1, p1]]))
