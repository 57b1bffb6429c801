import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print a PASS/FAIL line for an acceptance criterion, then assert it."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"acceptance {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        store[number] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
