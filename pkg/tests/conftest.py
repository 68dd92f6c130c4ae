import numpy as np
import pytest
from hypothesis import settings

from macx.cell import MODALITIES
from macx.synthdata import SyntheticSpec, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def small_spec(**overrides):
    """A quick-to-generate spec with short sequences and narrow features."""
    base = dict(task="xor3", instance_count=12, seed=3, noise=0.5,
                widths={j: 4 for j in MODALITIES}, lengths={j: (2, 6) for j in MODALITIES},
                question_width=4, question_length=(2, 5), answer_width=4, answer_length=(1, 3))
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(small_spec())


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    """Record one acceptance line; shown in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
