import numpy as np
import pytest

from cardioshape.mesh_core import BiventricularShape, Mesh
from cardioshape.synthetic import make_phantom

# (criterion, passed, detail) lines collected by test_acceptance
CRITERIA: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
    print(line)
    CRITERIA.append((criterion, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(CRITERIA, key=lambda c: _order(c[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}")


def _order(name: str):
    head = name.split()[0].rstrip(":")
    digits = "".join(ch for ch in head if ch.isdigit())
    return (int(digits) if digits else 99, name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom() -> BiventricularShape:
    return make_phantom(np.zeros(4))


@pytest.fixture
def tetra() -> Mesh:
    """Outward-oriented unit right tetrahedron (volume 1/6 mm^3)."""
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f)
