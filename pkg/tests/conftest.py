import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from flux_models import FluxModel, FourierSeries, StructureConstants, builtin_models  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (deselect with -m 'not slow')")


@pytest.fixture(scope='session')
def models():
    return builtin_models()


@pytest.fixture(scope='session')
def harmonic(models):
    return models['harmonic_mean_1d']


@pytest.fixture(scope='session')
def heat():
    """u' - u'' = f: the linear model with c = 1."""
    return FluxModel(family='linear', coefficients={'space': FourierSeries(mean=1.0)},
                     constants=StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=1.05, c2=0.95))


@pytest.fixture(scope='session')
def constant_two():
    return FluxModel(family='linear', coefficients={'space': FourierSeries(mean=2.0)},
                     constants=StructureConstants(p=2.0, alpha=1.0, c0=1.0, c1=2.1, c2=1.9))
