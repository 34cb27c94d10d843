import logging

import numpy as np
import pytest
from scipy.special import expit

from src.models.base import Family, MultiStudyDataset, StudyData
from src.models.mcecm import FitConfig
from src.models.sampler import SamplerConfig
from src.utils.logging import ROOT_LOGGER_NAME


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Run long Monte Carlo acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_dataset(seed=0, sizes=(20, 20), p=3, q=2, sigma2=1.0, family=Family.BERNOULLI,
                 beta=None, ids=None):
    """Synthetic multi-study data with random effects on the first q columns."""
    rng = np.random.default_rng(seed)
    beta = np.array([0.0, 1.0, -1.0] + [0.0] * (p - 3))[:p] if beta is None else np.asarray(beta, dtype=float)
    ids = ids or [f"s{k + 1}" for k in range(len(sizes))]
    studies = []
    for study_id, n in zip(ids, sizes):
        x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        alpha = np.sqrt(sigma2) * rng.standard_normal(q)
        eta = x @ beta + x[:, :q] @ alpha
        if Family.parse(family) is Family.BERNOULLI:
            y = rng.binomial(1, expit(eta)).astype(float)
        else:
            y = eta + 0.5 * rng.standard_normal(n)
        studies.append(StudyData(study_id, y, x, tuple(range(q))))
    return MultiStudyDataset(studies, family)


@pytest.fixture(scope="function")
def small_dataset():
    """Two bernoulli studies of 20 subjects, p=3, q=2."""
    return make_dataset()


@pytest.fixture(scope="function")
def gaussian_dataset():
    """Two gaussian studies of 25 subjects, p=3, q=1."""
    return make_dataset(seed=3, sizes=(25, 25), q=1, family=Family.GAUSSIAN)


@pytest.fixture(scope="function")
def quick_config():
    """A short, cheap MCECM configuration for smoke tests."""
    return FitConfig(max_iterations=3, draws_initial=20, draws_max=20,
                     sampler=SamplerConfig(burnin=20, seed=7))


@pytest.fixture(autouse=True)
def restore_package_logger():
    """Put the package logger back the way the test found it."""
    package = logging.getLogger(ROOT_LOGGER_NAME)
    saved = (list(package.handlers), package.level, package.propagate)
    yield
    for handler in package.handlers:
        if handler not in saved[0]:
            handler.close()
    package.handlers[:] = saved[0]
    package.setLevel(saved[1])
    package.propagate = saved[2]


@pytest.fixture(scope="function")
def temp_test_dir(tmp_path):
    """
    Creates a temporary directory for test-generated files.
    """
    test_dir = tmp_path / "test_output"
    test_dir.mkdir(parents=True, exist_ok=True)
    return test_dir

