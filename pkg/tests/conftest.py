import numpy as np
import pytest
import torch

from mvinpaint.scene import ObjectSpec, SceneSpec, render_scene


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def orbit_scene():
    return render_scene(SceneSpec(num_frames=6, resolution=32, trajectory="orbit", magnitude=4.0, object_spec=ObjectSpec()))


@pytest.fixture(scope="session")
def orbit_scene_64():
    return render_scene(SceneSpec(num_frames=5, resolution=64, trajectory="orbit", magnitude=6.0, object_spec=ObjectSpec()))


@pytest.fixture(scope="session")
def translate_scene():
    return render_scene(SceneSpec(num_frames=4, resolution=32, trajectory="translate", magnitude=0.1,
                                  object_spec=ObjectSpec(center=(0.2, 0.1))))


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
