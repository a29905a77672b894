import time

import numpy as np
import pytest

from fourierflow.fitting import FitConfig, fit_pipeline
from fourierflow.skeleton import default_skeleton
from fourierflow.synth import default_script, make_motion, make_template

_ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    _ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def skeleton():
    return default_skeleton()


@pytest.fixture(scope="session")
def template(skeleton):
    return make_template(skeleton)


@pytest.fixture(scope="session")
def noisy_sequence(skeleton, template):
    """Default staggered-flexion sequence, T=17, 5 mm joint noise."""
    return make_motion(skeleton, default_script(skeleton), noise_sigma=0.005, seed=0, template=template)


FIT_SECONDS: dict[str, float] = {}


@pytest.fixture(scope="session")
def fitted_noisy(skeleton, template, noisy_sequence):
    seq = noisy_sequence
    start = time.perf_counter()
    flow, report = fit_pipeline(skeleton, template, seq.noisy_joints, seq.times, seq.corr_samples(),
                                None, FitConfig(), seq.weight_field, seq.clean_joints)
    FIT_SECONDS["fitted_noisy"] = time.perf_counter() - start
    return flow, report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
