import pytest

from histore.cluster import make_cluster
from histore.runtime import SimRuntime
from histore.transport.base import NetConfig
from histore.transport.sim import SimTransport


@pytest.fixture
def sim():
    rt = SimRuntime(0)
    net = SimTransport(rt, NetConfig())
    return rt, net


@pytest.fixture
def cluster():
    c = make_cluster("hybrid", seed=1, capacity=4096)
    yield c
    assert not c.rt.task_failures, c.rt.task_failures


@pytest.fixture
def client(cluster):
    cl = cluster.client()
    cluster.run(cl.connect())
    return cl


# acceptance verdicts, echoed once more at the end of the run
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
