import numpy as np
import pytest

from crystal_ebm.cli import tune_allocator
from crystal_ebm.crystal import PeriodicUnit
from crystal_ebm.model import ModelConfig, init_params
from crystal_ebm.synthetic import rock_salt

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(node_dim=8, edge_dim=16, conv_layers=2)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    return init_params(small_cfg, 7)


@pytest.fixture
def nacl():
    return rock_salt(11, 17, 5.64, conventional=True)


@pytest.fixture
def nacl_primitive():
    return rock_salt(11, 17, 5.64)


def cubic(n_atoms=1, edge=2.0, species=None):
    """Atoms along the body diagonal of a cube."""
    species = [1] * n_atoms if species is None else species
    frac = np.outer(np.ones(3), np.arange(n_atoms) / max(n_atoms, 1))
    return PeriodicUnit.from_fractional(species, frac, edge * np.eye(3))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
