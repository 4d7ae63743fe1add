from contextlib import contextmanager

import pytest

from mis.crypto import get_scheme

# criterion number -> (passed, title, detail)
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture(scope="session")
def ed():
    return get_scheme("ed25519")


@pytest.fixture(scope="session")
def keys(ed):
    return [ed.keygen(f"test-node-{i}".encode()) for i in range(10)]


class Criterion:
    def __init__(self, number: int, title: str) -> None:
        self.number = number
        self.title = title
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def check(self, condition: bool, message: str) -> None:
        if not condition:
            raise AssertionError(message)


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's outcome."""

    @contextmanager
    def _run(number: int, title: str):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException as exc:
            detail = "; ".join(c.notes + [f"{type(exc).__name__}: {exc}"])
            ACCEPTANCE[number] = (False, title, detail)
            print(f"FAIL criterion {number}: {title} :: {detail}")
            raise
        detail = "; ".join(c.notes)
        ACCEPTANCE[number] = (True, title, detail)
        print(f"PASS criterion {number}: {title} :: {detail}")

    return _run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title} :: {detail}")
