"""Shared pytest wiring.

The acceptance tests register one PASS/FAIL outcome per numbered criterion
via ``record_acceptance``; the terminal-summary hook repeats those lines
after the run so they stay visible even though pytest swallows per-test
stdout for passing tests.
"""

from __future__ import annotations

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def record_acceptance(number: int, title: str, outcome: str) -> None:
    ACCEPTANCE_RESULTS[number] = (title, outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):  # noqa: ARG001
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, outcome = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"ACCEPTANCE {number} ({title}): {outcome}")
