import re

import pytest

VERDICTS: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then let the test assert."""
    number = re.match(r"test_criterion_(\d+)", request.node.name).group(1)
    seen = []

    def record(title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        if detail:
            line += f" [{detail}]"
        VERDICTS.append(line)
        seen.append(line)
        print(line)
        return ok

    yield record
    if not seen:
        VERDICTS.append(f"criterion {number} FAIL: {request.node.name} raised before a verdict")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
