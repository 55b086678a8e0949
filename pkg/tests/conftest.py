import pytest

ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def verdict(request):
    """Record one acceptance verdict: ``verdict(n, ok, detail)``."""
    table = request.config.stash[ACCEPTANCE]

    def record(n: int, ok: bool, detail: str = "") -> bool:
        table[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(ACCEPTANCE, {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(table):
        ok, detail = table[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
