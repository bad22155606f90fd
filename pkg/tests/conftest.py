import random

import pytest
from hypothesis import settings, strategies as st

from sfmtrack.dataset import FrameAnnotation, Sequence
from sfmtrack.geometry import BBox

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

coords = st.floats(-500, 500, allow_nan=False, allow_infinity=False)
sizes = st.floats(0.5, 200, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    return BBox(draw(coords), draw(coords), draw(sizes), draw(sizes))


def random_box(rng: random.Random, lo=0.0, hi=200.0) -> BBox:
    return BBox(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(2, 60), rng.uniform(2, 60))


def random_fixture(rng: random.Random, name: str, n_frames: int | None = None, p_absent=0.15,
                   noise=15.0):
    """A random sequence and a noisy prediction for it."""
    n = n_frames or rng.randint(1, 40)
    frames, preds = [], []
    for t in range(n):
        if t > 0 and rng.random() < p_absent:
            frames.append(FrameAnnotation.missing())
            preds.append(random_box(rng))
            continue
        b = random_box(rng)
        frames.append(FrameAnnotation.present(b))
        if rng.random() < 0.2:
            preds.append(b)
        else:
            preds.append(BBox(b.x + rng.gauss(0, noise), b.y + rng.gauss(0, noise),
                              max(1.0, b.w + rng.gauss(0, 5)), max(1.0, b.h + rng.gauss(0, 5))))
    return Sequence(name, "synthetic", frames), preds


def static_sequence(name="s", box=BBox(0, 0, 10, 10), n=3, attrs=frozenset()):
    return Sequence(name, "test", [FrameAnnotation.present(box)] * n, attrs)


@pytest.fixture
def rng():
    return random.Random(1234)


def pytest_terminal_summary(terminalreporter):
    import criteria

    if criteria.LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(criteria.LINES, key=lambda l: int(l.split()[1][1:])):
            terminalreporter.write_line(line)
