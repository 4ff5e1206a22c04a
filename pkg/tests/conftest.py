import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from minetrace.core import ChannelMeta, Series, Stream  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")

DAY = 86400
T0 = 1704067200  # 2024-01-01T00:00:00Z


def meta(cid="x", lo=-1e9, hi=1e9, kind="sensor", **kw):
    return ChannelMeta(cid, name=cid, unit="1", phys_min=lo, phys_max=hi, kind=kind, **kw)


def series(values, cid="x", t0=T0, dt=1, **kw):
    return Series(meta(cid, **kw), t0, dt, np.asarray(values, dtype=float))


def stream(columns: dict, t0=T0, dt=1, machine="m1"):
    return Stream(machine, t0, dt, {cid: series(v, cid, t0, dt, machine_id=machine) for cid, v in columns.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


def nan_equal(a, b) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a.shape == b.shape and bool(np.all((a == b) | (np.isnan(a) & np.isnan(b))))


def isnan(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v))


# acceptance verdicts, echoed in the terminal summary even when output is captured
VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
