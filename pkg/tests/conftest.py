import datetime as dt
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bugdup.corpus import BugReport  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Record one PASS/FAIL line per acceptance criterion (``ok=None`` means skipped)."""

    def record(number, title, ok, detail=""):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_report(issue_id, created="2020-01-01", summary="", description=""):
    return BugReport(
        id=issue_id,
        summary=summary or f"report {issue_id}",
        description=description,
        created_at=dt.date.fromisoformat(created),
    )
