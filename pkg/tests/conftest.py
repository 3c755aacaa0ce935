import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run full-scale (BERT-base shape) benchmark tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="full-scale benchmark; pass --run-slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _criteria[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")

    def order(name):
        num = name[len("test_criterion_"):].split("_")[0]
        return int(num) if num.isdigit() else 99

    for name in sorted(_criteria, key=order):
        outcome, detail = _criteria[name]
        num, _, title = name[len("test_criterion_"):].partition("_")
        line = f"criterion {num} [{title.replace('_', ' ')}]: {outcome}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
