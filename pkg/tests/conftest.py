import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from powerflow.policy import TabularPolicy
from powerflow.seqspace import SequenceSpace, Vocab

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def ab_space():
    """Vocabulary {a, EOS} with max length 2: [a,a], [a,EOS], [EOS]."""
    return SequenceSpace(Vocab(2), 2)


@pytest.fixture
def uniform_ab(ab_space):
    return TabularPolicy.uniform(ab_space)


def random_setup(seed, k=None, L=None, n_queries=1, scale=1.0):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 3)) if k is None else k
    L = int(rng.integers(1, 5)) if L is None else L
    space = SequenceSpace(Vocab(k + 1), L)
    return rng, space, TabularPolicy.random(space, n_queries, rng, scale)


# acceptance criteria append "A<n> PASS|FAIL detail" lines here
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
