import numpy as np
import pytest

from netform.design import DesignPlan, OfficeDesign
from netform.network import build_network

# criterion name -> (passed, detail); filled by test_acceptance
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def five_node_rows():
    return [
        {"id": "1", "office": "A", "new_hire": True},
        {"id": "2", "office": "A", "new_hire": True},
        {"id": "3"},
        {"id": "4"},
        {"id": "5"},
    ]


@pytest.fixture
def five_node_net():
    """Nodes 1..5, snapshot 1 edges (1,5),(5,3); snapshot 2 adds (1,3)."""
    return build_network(five_node_rows(), [("1", "5"), ("5", "3")], [("1", "5"), ("5", "3"), ("1", "3")])


@pytest.fixture
def five_node_plan(five_node_net):
    net = five_node_net
    office = OfficeDesign("A", (net.index_of("1"), net.index_of("2")), (net.index_of("3"), net.index_of("4")))
    return DesignPlan((office,), master_seed=11, n=net.n)


def random_graph(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    return [(str(a), str(b)) for a, b in zip(*np.nonzero(upper))]
