"""Telemetry ingestion, day-chunked storage and symbolic analysis for mining machines."""

from .core import ChannelMeta, Series, Stream, TimeRange, align, coverage_stats, slice_stream
from .errors import MinetraceError

__all__ = [
    "ChannelMeta",
    "MinetraceError",
    "Series",
    "Stream",
    "TimeRange",
    "align",
    "coverage_stats",
    "slice_stream",
]
__version__ = "0.1.0"
