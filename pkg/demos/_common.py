"""Helpers shared by the demo scripts."""

import argparse
import json
import tempfile
from pathlib import Path

from minetrace import cli
from minetrace.testgen import ScenarioSpec, generate


def parser(doc: str, days: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--days", type=int, default=days, help=f"scenario length (default {days})")
    p.add_argument("--out", help="working directory (default: a fresh temp dir)")
    return p


def workdir(out) -> Path:
    root = Path(out) if out else Path(tempfile.mkdtemp(prefix="minetrace_demo_"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def prepare(root: Path, scenario: dict, config: dict):
    """Generate packets, write the config and ingest; returns (manifest, base args)."""
    spec = ScenarioSpec.from_dict(scenario)
    manifest = generate(spec, root / "packets")
    config = {"machine_id": spec.machine_id, "channels": [c.to_dict() for c in spec.metas()], **config}
    (root / "config.json").write_text(json.dumps(config, indent=1), encoding="utf-8")
    base = ["--config", str(root / "config.json"), "--store", str(root / "store")]
    run("ingest", *base, str(root / "packets"))
    return manifest, base


def run(*argv) -> None:
    print("$ minetrace", " ".join(argv))
    code = cli.main(list(argv))
    if code:
        raise SystemExit(code)
