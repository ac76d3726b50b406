import contextlib

import pytest

_CRITERIA: dict[int, str] = {}


class Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.details = []

    def note(self, text):
        self.details.append(text)


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line for an acceptance criterion."""
    @contextlib.contextmanager
    def record(number, title):
        c = Criterion(number, title)
        status = "FAIL"
        try:
            yield c
            status = "PASS"
        except pytest.skip.Exception:
            status = "SKIP"
            raise
        except BaseException as exc:
            c.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        finally:
            detail = "; ".join(c.details)
            _CRITERIA[number] = f"{status} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
