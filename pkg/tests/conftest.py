import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from plmine.geometry import BBox  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@st.composite
def bboxes(draw, max_coord=100.0):
    x1 = draw(st.floats(0, max_coord - 1, allow_nan=False))
    y1 = draw(st.floats(0, max_coord - 1, allow_nan=False))
    w = draw(st.floats(0.5, max_coord, allow_nan=False))
    h = draw(st.floats(0.5, max_coord, allow_nan=False))
    return BBox(x1, y1, x1 + w, y1 + h)


def random_boxes(rng: np.random.Generator, n: int, size: float = 100.0) -> np.ndarray:
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(2, size / 2, (n, 2))
    return np.hstack([xy, xy + wh])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed at the end of the run whatever the capture mode
ACCEPTANCE: list[str] = []


def record_criterion(label: str, passed: bool, detail: str) -> None:
    line = f"criterion {label}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
