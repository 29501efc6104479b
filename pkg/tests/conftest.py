import pytest

from chrom_oed.edm_solver import SolverConfig
from chrom_oed.model import DesignBox, ParamBox
from chrom_oed.surrogate import train

TINY_SOLVER = SolverConfig(n_cells=30)


@pytest.fixture(scope="session")
def tiny_surrogate(tmp_path_factory):
    """2 x 2 design lattice, q = 5 (9 nodes), coarse solver: seconds to train."""
    out = tmp_path_factory.mktemp("tiny_surrogate")
    return train(TINY_SOLVER, ParamBox(), DesignBox(), 2, 2, 5, n_time=128, out_dir=out), out


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
