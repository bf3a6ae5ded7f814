import numpy as np
import pytest
from hypothesis import strategies as st

from splitplot.pom import BlockLayout, PotentialOutcomeMatrix


def random_pom(rng, W, M, scale=1.0):
    return PotentialOutcomeMatrix(BlockLayout(W, M), scale * rng.normal(size=(W * M, 4)))


def strict_pom(rng, W, M, shifts=(0.0, 0.5, -1.0, 2.0)):
    base = rng.normal(size=W * M)
    return PotentialOutcomeMatrix(BlockLayout(W, M), base[:, None] + np.asarray(shifts)[None, :])


def between_block_pom(rng, W, M):
    """Different unit effects but identical block-average effects."""
    y = rng.normal(size=(W, M, 4))
    y -= y.mean(axis=1, keepdims=True)
    y += rng.normal(size=(W, 1, 1)) + np.array([0.0, 1.0, -0.5, 0.25])
    return PotentialOutcomeMatrix.from_blocks(y)


def within_block_pom(rng, W, M):
    """Unit effects constant inside each block but varying across blocks."""
    base = rng.normal(size=(W, M, 1))
    shifts = rng.normal(size=(W, 1, 4))
    return PotentialOutcomeMatrix.from_blocks(base + shifts)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@st.composite
def layouts(draw, max_w=12, max_m=12):
    return BlockLayout(draw(st.integers(2, max_w)), draw(st.integers(2, max_m)))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Print and remember one PASS/FAIL line per acceptance criterion."""

    def report(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" -- {detail}" if detail else "")
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
