import numpy as np
import pytest

from eitqmc.cem import CemSystem, reference_patterns
from eitqmc.mesh import ElectrodeConfig, build_disk_mesh

RADIUS = 14.0
COARSE_H = 1.496
FINE_H = 0.748


@pytest.fixture(scope="session")
def electrodes16():
    return ElectrodeConfig.uniform(16, 2.8, 0.005)


@pytest.fixture(scope="session")
def coarse_mesh(electrodes16):
    return build_disk_mesh(RADIUS, COARSE_H, electrodes16)


@pytest.fixture(scope="session")
def coarse_system(coarse_mesh, electrodes16):
    return CemSystem(coarse_mesh, electrodes16)


@pytest.fixture(scope="session")
def patterns16():
    return reference_patterns(16)


@pytest.fixture(scope="session")
def unit_electrodes():
    return ElectrodeConfig.uniform(2, 0.5, 0.1)


@pytest.fixture(scope="session")
def unit_mesh(unit_electrodes):
    return build_disk_mesh(1.0, 0.5, unit_electrodes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    marks = dict(report.user_properties)
    if "criterion" not in marks:
        return
    if report.when == "call" or report.failed:
        k = marks["criterion"]
        status = "PASS" if report.passed else "FAIL"
        if k not in _ACCEPTANCE or status == "FAIL":
            _ACCEPTANCE[k] = (status, marks.get("title", ""), marks.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} {status}: {title}" + (f" ({detail})" if detail else ""))
