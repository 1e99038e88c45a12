"""Shared pytest hooks.

Acceptance tests record one verdict line per criterion here; the
terminal-summary hook echoes them after the run so they are visible
under any capture mode.
"""

acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
