import numpy as np
import pytest

from layoutmv.fixtures import make_fixture, sample_fixture_cameras
from layoutmv.scene import BackgroundShell, CameraPose, OrientedBox, SceneLayout

_CRITERIA: list[str] = []


def rect(wx, wz, cx=0.0, cz=0.0):
    return [[cx - wx / 2, cz - wz / 2], [cx + wx / 2, cz - wz / 2],
            [cx + wx / 2, cz + wz / 2], [cx - wx / 2, cz + wz / 2]]


def pinhole(position, rotation=np.eye(3), f=512.0, size=512):
    return CameraPose(position, rotation, f, f, size / 2, size / 2, size, size)


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def report(number: int, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bedroom():
    return make_fixture("bedroom5")


@pytest.fixture(scope="session")
def bedroom_rig(bedroom):
    """Four filtered cameras looking into the bedroom fixture."""
    return sample_fixture_cameras(bedroom, np.random.default_rng(0), 4)


@pytest.fixture
def stereo_scene():
    """One axis-aligned box 4 m in front of a camera at the origin, inside a large room."""
    box = OrientedBox(4, [1.0, 1.0, 1.0], [0.0, 1.0, 4.5], 0.0)
    return SceneLayout((box,), BackgroundShell(rect(12.0, 16.0, 0.0, 2.0), 3.0))
