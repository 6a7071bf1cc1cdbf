"""Shared pytest wiring: the acceptance-criteria result banner."""

from __future__ import annotations

import pytest


@pytest.fixture(scope="session")
def criteria(request):
    """Collector for acceptance-criterion outcomes.

    Each acceptance test computes its verdict, then calls the returned
    function exactly once; the terminal-summary hook prints one line per
    criterion after the run so the verdicts survive output capture.
    """
    lines: list[str] = []
    request.config._acceptance_lines = lines

    def check(name: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" :: {detail}" if detail else "")
        lines.append(line)
        print(line, flush=True)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
