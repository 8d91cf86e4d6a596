import numpy as np
import pytest
from hypothesis import settings

from simctr.datagen import GenConfig, generate

# first calls may include JIT compilation
settings.register_profile("simctr", deadline=None)
settings.load_profile("simctr")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_report(request, capsys):
    """Call with (number, passed, detail): prints one PASS/FAIL line now and in the summary."""

    def report(number, passed, detail):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'} {detail}"
        request.config.stash[_ACCEPTANCE].append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(GenConfig(users=120, items=300, categories=12, seq_len_median=40, max_seq_len=200,
                              samples_per_user=2, seed=7))
