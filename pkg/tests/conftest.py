import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary, failing the test on FAIL."""

    @contextmanager
    def record(number, title):
        notes = []
        try:
            yield notes
        except BaseException as exc:
            detail = "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0]])
            _VERDICTS.append((number, f"FAIL criterion {number} {title}: {detail}"))
            print(_VERDICTS[-1][1])
            raise
        _VERDICTS.append((number, f"PASS criterion {number} {title}: {'; '.join(notes)}"))
        print(_VERDICTS[-1][1])

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
