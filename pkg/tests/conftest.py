import numpy as np
import pytest

from pixelret.grid import RasterGrid


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(0))


def make_grid(values, px_per_nm=1.0, origin=(0.5, 0.5)):
    arr = np.asarray(values, dtype=np.float32)
    return RasterGrid(
        width=arr.shape[1],
        height=arr.shape[0],
        origin=origin,
        px_per_nm=px_per_nm,
        values=arr,
    )


@pytest.fixture
def grid_factory():
    return make_grid


# Acceptance criterion results, printed one line per criterion after the run.
CRITERIA_RESULTS: list[tuple[int, str, bool, str]] = []


def record_criterion(num: int, name: str, passed: bool, detail: str = "") -> None:
    CRITERIA_RESULTS.append((num, name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num, name, passed, detail in sorted(CRITERIA_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {num:2d} [{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
