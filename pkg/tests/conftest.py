"""Collects acceptance verdicts and prints them at the end of the session."""

import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


class Verdicts:
    def record(self, criterion: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        print(line)
        _VERDICTS.append((criterion, passed, detail))
        return passed


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
