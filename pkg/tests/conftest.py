import numpy as np
import pytest

from srdhomog.fem import SolverOptions
from srdhomog.microstructure import PhaseTable


@pytest.fixture(scope="session")
def concrete_table() -> PhaseTable:
    """Aggregate/mortar pair with stiffness contrast 2.5 (50/20 GPa, nu 0.3)."""
    return PhaseTable.from_entries([(0, 50000.0, 0.3), (1, 20000.0, 0.3)])


@pytest.fixture(scope="session")
def three_phase_table() -> PhaseTable:
    return PhaseTable.from_entries(
        [(0, 50000.0, 0.3), (1, 20000.0, 0.3), (2, None, None, "pore")]
    )


@pytest.fixture(scope="session")
def direct_opts() -> SolverOptions:
    return SolverOptions(method="direct")


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(20240801)
