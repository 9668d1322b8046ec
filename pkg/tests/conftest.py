import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def report():
    """Record one acceptance verdict; the summary is printed at session end."""
    def _record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        print(line)
        _RESULTS.append((name, ok, detail))
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_RESULTS, key=lambda r: int(r[0].split()[1])):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else ""))
