"""Prints one verdict line per acceptance criterion at run time."""


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "setup" and report.skipped:
        status = "SKIP"
    elif report.when == "call":
        status = "PASS" if report.passed else "FAIL"
    else:
        return
    criterion = report.nodeid.split("::")[-1].removeprefix("test_").replace("_", "-")
    print(f"\nACCEPTANCE {status}: {criterion}", flush=True)
