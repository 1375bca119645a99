from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "fixtures"
MINIDATA = FIXTURES / "minidata"


@pytest.fixture
def minidata() -> Path:
    return MINIDATA


@pytest.fixture
def mock_fixtures() -> Path:
    return FIXTURES / "backends"


ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES[number] = f"criterion {number}: {status}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
