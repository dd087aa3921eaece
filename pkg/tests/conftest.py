import numpy as np
import pytest

from tdex.core import TACTILE_SHAPE, Trajectory, identity_quat


def make_trajectory(n=20, seed=0, step=0.004, actions=True, visual_dim=None):
    """Random-walk trajectory with consistent shapes and optional actions."""
    rng = np.random.default_rng(seed)
    ee = np.cumsum(rng.normal(scale=step, size=(n, 3)), axis=0)
    tips = ee[:, None, :] + np.cumsum(rng.normal(scale=step, size=(n, 4, 3)), axis=0)
    joints = rng.uniform(0, 1, size=(n, 16))
    acts = None
    if actions:
        acts = np.concatenate([ee, np.tile(identity_quat(), (n, 1)), joints], axis=1)
    visual = None if visual_dim is None else rng.normal(size=(n, visual_dim))
    return Trajectory(
        t=np.arange(n) * 0.1,
        tactile=rng.uniform(-1, 1, size=(n,) + TACTILE_SHAPE),
        ee_pos=ee,
        ee_quat=np.tile(identity_quat(), (n, 1)),
        joints=joints,
        fingertips=tips,
        visual=visual,
        actions=acts,
    )


@pytest.fixture
def traj():
    return make_trajectory()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
