import numpy as np
import pytest

from depthsim import PatternImage, Scene, preset


@pytest.fixture
def kinect():
    return preset("kinect_v1")


@pytest.fixture
def small_cfg(kinect):
    """96x40 kinect crop looking at 700-1400 mm."""
    return kinect.replace(width=96, height=40, z_min=700.0, z_max=1400.0, block_size=7)


@pytest.fixture
def small_pattern(small_cfg):
    return PatternImage.for_sensor(small_cfg, seed=3)


@pytest.fixture
def frontal_plane():
    return Scene.plane_scene(1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(number, title, ok, detail):
        _ACCEPTANCE.append((number, f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"))
        print(_ACCEPTANCE[-1][1])
        assert ok, detail
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
