import os

# keep BLAS single-threaded before numpy loads: faster on small machines
# and required for bit-reproducible artifacts
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from datetime import datetime

import pytest

from staygen.geo import AreaMap

MONDAY = datetime(2018, 5, 7)  # a Monday


@pytest.fixture
def small_map() -> AreaMap:
    return AreaMap(
        lat_min=42.0, lat_max=42.5, lon_min=-71.5, lon_max=-70.9, grid_rows=2, grid_cols=3
    )
