import numpy as np
import pytest

from condcycle import dataset as D
from condcycle.semantic import pretrain_contrastive


@pytest.fixture(scope="session")
def small_scenes():
    """Eight in-memory scenes at 64x64 on the default 14-view grid."""
    return D.in_memory_dataset(8, res=64, seed=0)


@pytest.fixture(scope="session")
def small_encoders(small_scenes):
    imgs = np.stack([s.rgb for s in small_scenes])
    enc, _ = pretrain_contrastive(imgs, [s.caption for s in small_scenes], epochs=200)
    return enc


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per criterion and fail the test on FAIL."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
