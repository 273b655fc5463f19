import logging

import numpy as np
import pytest

from croco.synthgen import SceneSpec, generate_scene

logging.getLogger("croco.sampling").setLevel(logging.ERROR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(seed=3, size_px=96, gsd_m=0.5, n_structures=6, min_patch_px=16))


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if not name.startswith("test_a"):
        return
    crit = "A" + name[len("test_a"):].split("_")[0]
    if report.when == "call" or report.failed:
        _CRITERIA.setdefault(crit, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        ok = all(_CRITERIA[crit])
        terminalreporter.write_line(f"{crit}: {'PASS' if ok else 'FAIL'} ({len(_CRITERIA[crit])} checks)")
