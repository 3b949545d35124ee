import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from farfield.scene import RoomSpec, SceneSpec, render_scene, speech_like  # noqa: E402

logging.getLogger("farfield").setLevel(logging.ERROR)

# lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.fixture(scope="session")
def reverberant_scene():
    """Single talker, t60 = 0.5 s, two mics 10 cm apart, 5 s source."""
    spec = SceneSpec(
        RoomSpec((6.0, 5.0, 3.0), t60=0.5),
        mic_positions=[[3.0, 2.0, 1.4], [3.1, 2.0, 1.4]],
        source_positions=[[4.5, 3.5, 1.6]],
        source_signals=[speech_like(5.0, 16000, 0)],
        seed=0,
    )
    return render_scene(spec)


@pytest.fixture(scope="session")
def two_talker_scene():
    """Two talkers plus white noise at 5 dB, t60 = 0.3 s, four mics."""
    spec = SceneSpec(
        RoomSpec((6.0, 5.0, 3.0), t60=0.3),
        mic_positions=[[2.85, 2.4, 1.4], [2.95, 2.4, 1.4], [3.05, 2.4, 1.4], [3.15, 2.4, 1.4]],
        source_positions=[[2.2, 3.3, 1.6], [3.9, 3.3, 1.6]],
        source_signals=[speech_like(3.0, 16000, 1), speech_like(3.0, 16000, 2)],
        snr_db=5.0,
        seed=0,
    )
    return render_scene(spec)
