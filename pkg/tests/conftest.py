import pytest

from twinchain.consensus import ConsensusConfig
from twinchain.ledger import Proposal, Transaction
from twinchain.network import FailureSchedule, NetworkSchedule


def make_proposal(n_txs=4, size=500, producer=0, at=0, slot=0):
    txs = tuple(Transaction(i, size, max(0, at - 100 + i), 0) for i in range(n_txs))
    return Proposal(slot, producer, txs, at)


def uniform_network(speed, n=5, horizon=60_000, interval=30_000):
    return NetworkSchedule.constant(n, speed, horizon, interval)


@pytest.fixture
def cfg():
    return ConsensusConfig()


@pytest.fixture
def no_failures():
    return FailureSchedule()


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_lines(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
