from __future__ import annotations

import pytest

from streamledger.endorser import NULL

from .helpers import Crew


@pytest.fixture
def crew() -> Crew:
    return Crew()


@pytest.fixture
def null_crew() -> Crew:
    return Crew(crypto=NULL)


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2} ({title}): {detail}")
