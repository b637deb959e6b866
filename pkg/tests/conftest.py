import numpy as np
import pytest

from phystrack import rotations as rot
from phystrack.kinematics import BALL, FREE, HINGE, Camera, Joint, Pose, Skeleton


def chain2() -> Skeleton:
    """Root plus two joints, unit offsets along x, hinges about z."""
    return Skeleton([
        Joint("root", None, FREE),
        Joint("j1", 0, HINGE, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        Joint("j2", 1, HINGE, (1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
    ])


def mixed_skeleton() -> Skeleton:
    """Small tree with ball and hinge joints."""
    return Skeleton([
        Joint("root", None, FREE),
        Joint("a", 0, BALL, (0.0, 0.1, -0.3)),
        Joint("b", 1, HINGE, (0.0, 0.0, -0.4), (0.0, 1.0, 0.0)),
        Joint("c", 0, BALL, (0.0, -0.1, -0.3)),
        Joint("d", 3, HINGE, (0.05, 0.0, -0.4), (1.0, 0.0, 0.0)),
        Joint("e", 0, HINGE, (0.0, 0.0, 0.5), (0.0, 0.0, 1.0)),
    ])


def random_rotation(rng) -> np.ndarray:
    return rot.quat_to_mat(rot.quat_normalize(rng.standard_normal(4)))


def front_camera(f: float = 500.0) -> Camera:
    return Camera.look_at((0.0, -4.0, 1.0), (0.0, 0.0, 1.0), fx=f, fy=f)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
