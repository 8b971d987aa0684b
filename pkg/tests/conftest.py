from pathlib import Path

import pytest
from hypothesis import settings

from mevauction.auction import Opportunity

# first calls into numba kernels include JIT compilation
settings.register_profile("default", deadline=None)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def opp(route=("uniswap_v2",), mev=10.0, block=1, oid="o", freq=0.0):
    return Opportunity(oid, block, mev, tuple(route), freq)


@pytest.fixture
def data_dir():
    return DATA


# -- acceptance criterion reporting -------------------------------------------------

_criteria: dict[int, dict] = {}



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"{status} [{number:>2}] {e['title']} ({e['tests']} test(s))")
