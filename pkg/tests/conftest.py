import pytest

# (number, title, passed, detail) for each acceptance criterion that ran
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        line = f"CRITERION {number} {title}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE_RESULTS.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
