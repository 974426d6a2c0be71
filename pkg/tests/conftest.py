import test_acceptance

CRITERIA = {
    1: "conservation",
    2: "CTM oracle equivalence",
    3: "hysteresis",
    4: "friction",
    5: "split-ratio solver",
    6: "monotonicity and bisection",
    7: "round-trip calibration",
    8: "metrics",
    9: "determinism",
}


def pytest_terminal_summary(terminalreporter):
    results = test_acceptance.RESULTS
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} ({name}): NOT RUN or errored")
