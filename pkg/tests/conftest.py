import numpy as np
import pytest

from cardiogcn.keypoints import extract_keypoints
from cardiogcn.phantom import generate_phantom

# criterion number -> (passed, detail), filled in by test_acceptance
ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def phantom():
    img, mask = generate_phantom(0)
    return img, mask, extract_keypoints(mask)


@pytest.fixture(scope="session")
def phantoms():
    out = []
    for s in range(12):
        img, mask = generate_phantom(s)
        out.append((img, mask, extract_keypoints(mask)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
