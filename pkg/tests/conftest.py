import pytest

from storepush.cluster import LocalCluster


@pytest.fixture
def cluster():
    c = LocalCluster(capacity_blocks=1 << 14)
    yield c
    c.close()


def write_file(cluster, name: str, data: bytes) -> int:
    inode = cluster.store.create_file(name)
    cluster.store.append(inode, data)
    cluster.sync()
    return inode


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, text = results[n]
        terminalreporter.write_line(f"{n} {'PASS' if ok else 'FAIL'} {text}")
