"""Incident analysis: find short overloads in two months of boom load data.

Each overload is preceded by a working phase and followed by a drop to
idle.  The symbolic pattern finds every episode, and the event report pulls
the five minutes before each one at full resolution, ready for review.

    python3 demos/incident_analysis.py --days 61
"""

import math

from _common import parser, prepare, run, workdir
from minetrace.testgen import INCIDENT_NOUN_BINS, INCIDENT_PATTERN, incident_scenario


def main():
    args = parser(__doc__, days=61).parse_args()
    root = workdir(args.out)
    events = max(1, round(63 * args.days / 61))
    config = {
        "lexicons": [{"channel_id": "boom_load",
                      "noun_bins": [[None if math.isinf(u) else u, l] for u, l in INCIDENT_NOUN_BINS]}],
        "patterns": {"overload": {"source": "boom_load", "text": INCIDENT_PATTERN}},
        "context_window_s": 300,
    }
    manifest, base = prepare(root, incident_scenario(days=args.days, events=events), config)
    run("events", *base, "overload", "--report", str(root / "report"), "--plot", str(root / "plots"))

    timeline = (root / "report" / "timeline.csv").read_text().splitlines()[1:]
    print(f"\n{len(manifest.events)} overloads were injected and {len(timeline)} events were detected.")
    print("first events (id, instant):")
    for line in timeline[:3]:
        print("  ", ", ".join(line.split(",")[:2]))
    print(f"per-event context CSVs are in {root / 'report'}, plots in {root / 'plots'}")


if __name__ == "__main__":
    main()
