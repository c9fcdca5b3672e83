import numpy as np
import pytest

from slicefem.mesh import apply_terrain, build_mesh

_ACCEPTANCE_LINES: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (long running)")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: s[0]):
            terminalreporter.write_line(line[1])


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    def report(key, ok: bool, detail: str, info: bool = False):
        tag = "INFO" if info else ("PASS" if ok else "FAIL")
        line = f"criterion {key}: {tag} {detail}"
        _ACCEPTANCE_LINES.append((str(key), line))
        print(line)
        return ok
    return report


@pytest.fixture
def flat_mesh():
    return build_mesh(4, 3, 4000.0, 3000.0, -2000.0)


@pytest.fixture
def terrain_mesh():
    return apply_terrain(build_mesh(4, 3, 4000.0, 3000.0, -2000.0),
                         lambda x: 400.0 * np.exp(-(x / 900.0) ** 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
