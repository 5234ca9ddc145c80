import pytest

from medium import medium_preset
from potential import clear_kernel_cache
from transducer import BowlTransducer, transducer_preset


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow convergence studies')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_solver_state(monkeypatch):
    """Single-threaded FFTs and an empty kernel cache for every test."""
    monkeypatch.setenv('FUS_THREADS', '1')
    clear_kernel_cache()
    yield
    clear_kernel_cache()


@pytest.fixture
def water():
    return medium_preset('water')


@pytest.fixture
def liver():
    return medium_preset('liver')


@pytest.fixture
def h131():
    return transducer_preset('H131', power=100.0, n_points=4096)


@pytest.fixture
def low_frequency_h131():
    """H131 geometry at 0.25 MHz: a nested cascade that fits in a few MB."""
    return BowlTransducer(f0=0.25e6, focal_length=0.035, outer_radius=0.0165, power=50.0, n_points=256,
                          name='H131-250k')


class SmallCascade:
    """Nested three-harmonic run of the low-frequency H131 setup, shared across a module."""

    def __init__(self, power=10.0, n_harmonics=3, n_w=3):
        from cascade import CascadeConfig, run_cascade
        from grid import plan_nested_meshes
        from transducer import IncidentField

        self.medium = medium_preset('water')
        self.transducer = BowlTransducer(f0=0.25e6, focal_length=0.035, outer_radius=0.0165, power=power,
                                         n_points=256, name='H131-250k')
        self.plan = plan_nested_meshes(self.transducer, self.medium, 10.2e-3, n_w, n_harmonics)
        self.incident = IncidentField(self.transducer, self.medium)
        self.config = CascadeConfig(self.medium, self.transducer, self.plan, n_harmonics)
        self.result = run_cascade(self.config, self.incident)


@pytest.fixture(scope='module')
def small_cascade():
    return SmallCascade()
