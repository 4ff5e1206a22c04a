"""Static PNG figures for event timelines, event traces and polar histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import format_iso  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def event_timeline(events, rng, path) -> Path:
    """One vertical line per event over the analysed range."""
    fig, ax = plt.subplots(figsize=(10, 2.5))
    days = np.array([e.t_event for e in events], dtype=float) / 86400.0
    ax.vlines(days, 0, 1, color="tab:red", linewidth=0.8)
    if rng is not None:
        ax.set_xlim(rng.start / 86400.0, rng.end / 86400.0)
    ax.set_yticks([])
    ax.set_xlabel("days since epoch (UTC)")
    ax.set_title(f"{len(events)} events")
    return _save(fig, path)


def event_traces(event, stream, path) -> Path:
    """Raw traces of every channel over one event window, one panel each."""
    ids = list(stream.channels)
    fig, axes = plt.subplots(max(1, len(ids)), 1, figsize=(8, 1.6 * max(1, len(ids))), sharex=True, squeeze=False)
    rel = stream.times() - event.t_event
    for ax, cid in zip(axes[:, 0], ids):
        ax.plot(rel, stream[cid].values, linewidth=0.8)
        ax.set_ylabel(cid, fontsize=8)
    axes[-1, 0].set_xlabel(f"seconds relative to {format_iso(event.t_event)}")
    axes[0, 0].set_title(f"event {event.event_id}")
    return _save(fig, path)


def polar(hist, path, title: str = "") -> Path:
    """Mean load per angle bin as a polar bar chart."""
    bins = hist.bins
    theta = np.radians([b.angle_start_deg + hist.bin_width_deg / 2 for b in bins])
    means = np.nan_to_num([b.mean for b in bins])
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="polar")
    ax.bar(theta, means, width=np.radians(hist.bin_width_deg), edgecolor="k", linewidth=0.3)
    ax.set_theta_zero_location("N")
    ax.set_theta_direction(-1)
    ax.set_title(title)
    return _save(fig, path)
