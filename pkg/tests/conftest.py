import json
import pathlib
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(pathlib.Path(__file__).parent))

settings.register_profile("voxnav", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("voxnav")

DATA = pathlib.Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def frozen():
    return json.loads((DATA / "frozen_oracles.json").read_text())


@pytest.fixture(scope="session")
def clutter_scene():
    from voxnav.world import SceneParams, generate_scene
    return generate_scene(SceneParams(), seed=3)


@pytest.fixture(scope="session")
def small_scene():
    """4 m square room with one pillar, cheap to plan and render in."""
    from voxnav.world import SceneParams, scene_from_floor
    floor = np.zeros((40, 40), dtype=bool)
    floor[:2], floor[-2:], floor[:, :2], floor[:, -2:] = True, True, True, True
    floor[18:22, 18:22] = True
    return scene_from_floor(floor, SceneParams(size=4.0), seed=0, scene_id="room")


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
