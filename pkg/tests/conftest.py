import numpy as np
import pytest

from levelsmith.grid_env import LevelParams, TileType

CHARS = {".": TileType.EMPTY, "#": TileType.WALL, "m": TileType.MOSS, "L": TileType.LAVA,
         "G": TileType.GOAL, "S": TileType.START}


def make_level(*rows, id=""):
    grid = np.array([[CHARS[c] for c in r] for r in rows], dtype=np.int8)
    return LevelParams(grid, id)


@pytest.fixture
def corridor():
    return make_level("S...G")


@pytest.fixture(scope="session")
def small_levels():
    from levelsmith.wfc import GenConfig, generate_set

    return generate_set(GenConfig(size=(7, 7)), 6, seed=3, prefix="t")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
