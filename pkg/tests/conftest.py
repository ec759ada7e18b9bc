import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from partnerf.body import build_toy_body
from partnerf.data import SequenceSpec, generate_synthetic_sequence

settings.register_profile(
    "repo",
    deadline=None,
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", 40)),
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def body():
    return build_toy_body()


@pytest.fixture(scope="session")
def small_dataset():
    # 6 frames at 32x32: enough for plumbing tests, cheap to train on
    return generate_synthetic_sequence(SequenceSpec(frames=6, resolution=32, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(body, rng, scale=0.6, time=0.5, frame=0):
    from partnerf.body import Pose

    rot = rng.normal(0.0, scale, (body.num_joints, 3))
    return Pose(rot, rng.normal(0.0, 0.1, 3), time, frame)


# one summary line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(name: str, ok: bool, detail: str) -> bool:
    line = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[name] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE_LINES, key=lambda n: int(n.split("-")[1])):
            terminalreporter.write_line(ACCEPTANCE_LINES[name])
