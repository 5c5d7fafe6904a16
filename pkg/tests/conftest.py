from datetime import datetime

import numpy as np
import pytest

from pmquant.raster import BandStack, MaskRaster, Raster, RasterGrid


@pytest.fixture
def grid8():
    return RasterGrid(-118.5, 34.2, 0.01, 8, 8)


def make_stack(grid, bands, when=datetime(2016, 3, 5), valid=None, ids=None, location="la"):
    bands = np.asarray(bands, dtype=float)
    ids = ids or tuple(f"B{i + 1}" for i in range(bands.shape[0]))
    return BandStack(grid, bands, ids, valid, when, location)


def make_raster(grid, values, valid=None):
    return Raster(grid, np.asarray(values, dtype=float), valid)


def make_mask(grid, validity):
    return MaskRaster(grid, np.asarray(validity, dtype=bool))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
