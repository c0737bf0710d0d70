ACCEPTANCE_RESULTS = {}


def record(number: int, name: str, passed: bool, detail: str = ""):
    ACCEPTANCE_RESULTS[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[number]
        tr.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {name}: {detail}")
