import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, title, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: "
                                    f"{title} | {detail}")
