"""Commissioning check: spot sensors that glitch for single samples.

A month of hydraulic pressure at 1 s contains a handful of isolated bad
samples per day.  They are invisible in any daily plot, but the local
median/MAD scan finds each of them and nothing else.

    python3 demos/commissioning.py --days 30
"""

import contextlib
import json

from _common import parser, prepare, workdir
from minetrace import cli
from minetrace.core import format_iso
from minetrace.testgen import commissioning_scenario


def main():
    args = parser(__doc__, days=30).parse_args()
    root = workdir(args.out)
    manifest, base = prepare(root, commissioning_scenario(days=args.days), {})
    out = root / "faults.ndjson"
    with open(out, "w", encoding="utf-8") as fh, contextlib.redirect_stdout(fh):
        cli.main(["faults", *base, "hyd_pressure"])
    flagged = {json.loads(line)["t"] for line in out.read_text().splitlines()}
    injected = {format_iso(t) for _, t in manifest.spikes}
    print(f"\n{len(injected)} glitches injected over {args.days} days, {len(flagged)} flagged")
    print(f"missed {len(injected - flagged)}, false flags {len(flagged - injected)}; details in {out}")


if __name__ == "__main__":
    main()
