import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from maskfuse import _kernels
from maskfuse.volume import CameraIntrinsics, Frame

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BACKENDS = _kernels.backends()

# acceptance lines collected during the run, echoed in the terminal summary
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture(params=sorted(BACKENDS), ids=lambda name: f"kernels={name}")
def kernels(request):
    return BACKENDS[request.param]


def intrinsics(width=64, height=48, f=50.0):
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def wall_frame(z=2.0, frame_id=0, K=None, pose=None, labels=None):
    """Camera at the origin looking down +z at a fronto-parallel wall."""
    K = K or intrinsics()
    depth = np.full((K.height, K.width), z)
    return Frame(frame_id, depth, np.eye(4) if pose is None else pose, K, labels)
