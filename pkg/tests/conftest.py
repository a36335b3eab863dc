import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from scancov import shapes  # noqa: E402

# criterion id -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def record_acceptance(cid, title, passed, detail):
    ACCEPTANCE[cid] = (title, bool(passed), detail)
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {cid}: {title}: {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {cid}: {title}: {detail}")


@pytest.fixture(scope="session")
def cube():
    return shapes.unit_cube()


@pytest.fixture(scope="session")
def test_meshes():
    return {
        "cube": shapes.box((2.0, 2.0, 2.0), cell=0.5),
        "sphere": shapes.icosphere(1.0, 2),
        "torus": shapes.torus(2.0, 0.6, 24, 10),
        "l_prism": shapes.l_prism(4.0, 1.5, 3.0, 0.5),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
