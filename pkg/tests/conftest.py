from _util import ACCEPTANCE

N_CRITERIA = 10


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, title, detail = ACCEPTANCE[n]
            tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            tr.write_line(f"criterion {n:2d}: NOT RUN")
