import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynpatch.scenesim import SceneConfig, TrajectorySpec, generate_driving_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_frames():
    """A dozen rendered frames of one non-stop sign scenario."""
    spec = TrajectorySpec(sign_classes=("go_straight",), frames_per_episode=4, background_seeds=(0, 1),
                          scenario="go_straight")
    return generate_driving_dataset(SceneConfig(), spec, 12, seed=7).frames


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
