import numpy as np
import pytest

from qclt.chain import build_joint_chain
from qclt.io import RandomMdpSpec, generate_mdp, load_config, load_fixture
from qclt.mdp import MdpModel
from qclt.oracle import build_oracle

ACCEPTANCE_LINES = []

RANDOM_SHAPES = [(2, 2), (3, 2), (4, 3), (6, 4), (8, 3), (5, 2), (3, 3), (4, 4),
                 (12, 2), (2, 5)]


def record_acceptance(number, title, passed, detail):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_fixture(i):
    n_s, n_a = RANDOM_SHAPES[i]
    spec = RandomMdpSpec(n_s, n_a, sparsity=0.6, reward_seed=100 + i,
                         transition_seed=200 + i, gamma=(0.5, 0.7, 0.9, 0.95)[i % 4])
    return generate_mdp(spec)


@pytest.fixture(scope="session")
def default_mdp():
    return load_fixture("builtin:default")


@pytest.fixture(scope="session")
def default_chain(default_mdp):
    return build_joint_chain(default_mdp)


@pytest.fixture(scope="session")
def default_oracle(default_mdp, default_chain):
    return build_oracle(default_mdp, default_chain)


@pytest.fixture(scope="session")
def clt_config():
    return load_config("builtin:default_clt")


@pytest.fixture(scope="session")
def fclt_config():
    return load_config("builtin:default_fclt")


@pytest.fixture(scope="session")
def random_fixtures():
    return [random_fixture(i) for i in range(len(RANDOM_SHAPES))]


def make_mdp(P, r, gamma, pb=None, name="test"):
    P = np.asarray(P, dtype=float)
    if pb is None:
        pb = np.full(P.shape[:2], 1.0 / P.shape[1])
    return MdpModel(P, r, gamma, pb, name=name)


@pytest.fixture
def small_mdp():
    """Two states, two actions, mixed dynamics."""
    P = [[[0.7, 0.3], [0.2, 0.8]], [[0.4, 0.6], [0.9, 0.1]]]
    return make_mdp(P, [[0.1, 0.9], [0.5, 0.3]], 0.8)


@pytest.fixture
def zero_reward_mdp(default_mdp):
    return MdpModel(default_mdp.transition, np.zeros((3, 2)), default_mdp.discount,
                    default_mdp.behavior_policy, name="zero")
