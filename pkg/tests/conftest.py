import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class AcceptanceLog:
    def record(self, number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(passed), detail)
        line = f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
