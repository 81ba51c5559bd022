from collections import defaultdict

# criterion number -> list of (passed, detail); filled by test_acceptance.py
CRITERIA = defaultdict(list)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        checks = CRITERIA[n]
        ok = all(p for p, _ in checks)
        failed = [d for p, d in checks if not p]
        detail = "; ".join(failed) if failed else "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
