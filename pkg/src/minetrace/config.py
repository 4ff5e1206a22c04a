"""Machine configuration: the single metadata document per machine.

Structure is checked against a JSON schema first, then every cross
reference (lexicon channels, state inputs, pattern sources, expression
inputs) is resolved.  Error messages carry the JSON path of the offending
element, e.g. ``lexicons[1].channel_id: unknown channel 'x'``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import jsonschema

from .astsa import AdjectiveRule, Lexicon, StateLexicon
from .core import ChannelMeta
from .derived import DerivedSpec, references
from .errors import ConfigError
from .symquery import Pattern, parse_pattern

_CHANNEL = {
    "type": "object",
    "required": ["channel_id"],
    "properties": {
        "channel_id": {"type": "string", "pattern": "^[a-z0-9_]+$"},
        "name": {"type": "string"},
        "unit": {"type": "string"},
        "phys_min": {"type": "number"},
        "phys_max": {"type": "number"},
        "location": {"type": "string"},
        "hypothesis": {"type": "string"},
        "kind": {"enum": ["sensor", "derived"]},
    },
}

_BINS = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "array",
        "prefixItems": [{"type": ["number", "null"]}, {"type": "string"}],
        "items": False,
        "minItems": 2,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["machine_id", "channels"],
    "additionalProperties": False,
    "properties": {
        "machine_id": {"type": "string", "minLength": 1},
        "nominal_dt_seconds": {"type": "integer", "minimum": 1},
        "channels": {"type": "array", "items": _CHANNEL},
        "derived": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["output", "expression"],
                "properties": {
                    "output": _CHANNEL,
                    "expression": {"type": "string"},
                    "constants": {"type": "object", "additionalProperties": {"type": "number"}},
                },
            },
        },
        "lexicons": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["channel_id", "noun_bins"],
                "properties": {
                    "channel_id": {"type": "string"},
                    "noun_bins": _BINS,
                    "hysteresis": {"type": "number", "minimum": 0},
                    "verb_naming": {
                        "type": "array",
                        "items": {"type": "array", "items": {"type": "string"}, "minItems": 3, "maxItems": 3},
                    },
                    "adverb_bins": {**_BINS, "minItems": 0},
                    "adjective_rules": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["channel_id", "comparator", "threshold", "label"],
                            "properties": {
                                "channel_id": {"type": "string"},
                                "comparator": {"enum": [">", "<", ">=", "<=", "=="]},
                                "threshold": {"type": "number"},
                                "label": {"type": "string"},
                                "key": {"type": "string"},
                            },
                        },
                    },
                    "pause_noun": {"type": ["string", "null"]},
                    "pause_thresholds": {
                        "type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2,
                    },
                },
            },
        },
        "state_lexicons": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "inputs", "mapping"],
                "properties": {
                    "id": {"type": "string"},
                    "inputs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "mapping": {
                        "type": "array",
                        "items": {
                            "type": "array",
                            "prefixItems": [{"type": "array", "items": {"type": "string"}}, {"type": "string"}],
                            "items": False,
                            "minItems": 2,
                        },
                    },
                    "default_label": {"type": "string"},
                },
            },
        },
        "patterns": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["source", "text"],
                "properties": {"source": {"type": "string"}, "text": {"type": "string"}},
            },
        },
        "context_window_s": {"type": "integer", "minimum": 1},
        "report_channels": {"type": "array", "items": {"type": "string"}},
    },
}


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def _bins(raw) -> tuple:
    return tuple((math.inf if u is None else float(u), label) for u, label in raw)


@dataclass(frozen=True)
class MachineConfig:
    machine_id: str
    nominal_dt_seconds: int
    channels: tuple
    derived: tuple = ()
    lexicons: Mapping[str, Lexicon] = field(default_factory=dict)
    state_lexicons: Mapping[str, StateLexicon] = field(default_factory=dict)
    patterns: Mapping[str, tuple] = field(default_factory=dict)  # name -> (source, Pattern)
    context_window_s: int = 300
    report_channels: tuple = ()

    @property
    def channel_ids(self) -> list[str]:
        return [c.channel_id for c in self.channels] + [d.output.channel_id for d in self.derived]

    def pattern(self, name: str) -> tuple[str, Pattern]:
        try:
            return self.patterns[name]
        except KeyError:
            raise ConfigError(f"patterns: no pattern named {name!r}") from None


def config_from_dict(doc: dict) -> MachineConfig:
    """Validate ``doc`` and build a :class:`MachineConfig`; raises :class:`ConfigError`."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError("; ".join(f"{_path(e.absolute_path)}: {e.message}" for e in errors))

    def build(where, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    mid = doc["machine_id"]
    channels = tuple(
        build(f"channels[{i}]", ChannelMeta.from_dict, c, mid) for i, c in enumerate(doc["channels"])
    )
    known = {c.channel_id for c in channels}
    if len(known) != len(channels):
        raise ConfigError("channels: duplicate channel_id")

    derived = []
    for i, d in enumerate(doc.get("derived", ())):
        out = build(f"derived[{i}].output", ChannelMeta.from_dict, {"kind": "derived", **d["output"]}, mid)
        spec = build(f"derived[{i}]", DerivedSpec, out, d["expression"], dict(d.get("constants", {})))
        chans, consts = references(spec.tree)
        for c in sorted(chans - known):
            raise ConfigError(f"derived[{i}].expression: unknown channel {c!r}")
        for c in sorted(consts - set(spec.constants)):
            raise ConfigError(f"derived[{i}].expression: unknown constant meta.{c}")
        if out.channel_id in known:
            raise ConfigError(f"derived[{i}].output.channel_id: {out.channel_id!r} already defined")
        known.add(out.channel_id)
        derived.append(spec)

    lexicons = {}
    for i, lx in enumerate(doc.get("lexicons", ())):
        where = f"lexicons[{i}]"
        if lx["channel_id"] not in known:
            raise ConfigError(f"{where}.channel_id: unknown channel {lx['channel_id']!r}")
        rules = []
        for j, r in enumerate(lx.get("adjective_rules", ())):
            if r["channel_id"] not in known:
                raise ConfigError(f"{where}.adjective_rules[{j}].channel_id: unknown channel {r['channel_id']!r}")
            rules.append(build(f"{where}.adjective_rules[{j}]", AdjectiveRule, r["channel_id"], r["comparator"],
                               float(r["threshold"]), r["label"], r.get("key", "adj")))
        lex = build(where, Lexicon,
                    channel_id=lx["channel_id"],
                    noun_bins=_bins(lx["noun_bins"]),
                    hysteresis=float(lx.get("hysteresis", 0.0)),
                    verb_naming={(a, b): v for a, b, v in lx.get("verb_naming", ())},
                    adverb_bins=_bins(lx.get("adverb_bins", ())),
                    adjective_rules=tuple(rules),
                    pause_noun=lx.get("pause_noun"),
                    pause_thresholds=tuple(lx.get("pause_thresholds", (60, 600))))
        if lex.channel_id in lexicons:
            raise ConfigError(f"{where}.channel_id: second lexicon for {lex.channel_id!r}")
        if lex.pause_noun is not None and lex.pause_noun not in lex.labels:
            raise ConfigError(f"{where}.pause_noun: {lex.pause_noun!r} is not a noun of this lexicon")
        lexicons[lex.channel_id] = lex

    states = {}
    for i, s in enumerate(doc.get("state_lexicons", ())):
        where = f"state_lexicons[{i}]"
        for j, cid in enumerate(s["inputs"]):
            if cid not in lexicons:
                raise ConfigError(f"{where}.inputs[{j}]: no lexicon for channel {cid!r}")
        for j, (key, _) in enumerate(s["mapping"]):
            if len(key) != len(s["inputs"]):
                raise ConfigError(f"{where}.mapping[{j}][0]: {len(key)} nouns for {len(s['inputs'])} inputs")
            for k, (noun, cid) in enumerate(zip(key, s["inputs"])):
                if noun not in lexicons[cid].labels:
                    raise ConfigError(f"{where}.mapping[{j}][0][{k}]: {noun!r} is not a noun of {cid!r}")
        if s["id"] in states or s["id"] in lexicons:
            raise ConfigError(f"{where}.id: {s['id']!r} already names a symbol source")
        states[s["id"]] = build(where, StateLexicon, s["id"], tuple(s["inputs"]),
                                {tuple(k): v for k, v in s["mapping"]}, s.get("default_label", "other"))

    patterns = {}
    for name, p in doc.get("patterns", {}).items():
        where = f"patterns.{name}"
        if p["source"] not in lexicons and p["source"] not in states:
            raise ConfigError(f"{where}.source: {p['source']!r} is neither a lexicon channel nor a state lexicon")
        patterns[name] = (p["source"], build(f"{where}.text", parse_pattern, p["text"]))

    report = tuple(doc.get("report_channels", ()))
    for j, cid in enumerate(report):
        if cid not in known:
            raise ConfigError(f"report_channels[{j}]: unknown channel {cid!r}")

    return MachineConfig(
        machine_id=mid,
        nominal_dt_seconds=int(doc.get("nominal_dt_seconds", 1)),
        channels=channels,
        derived=tuple(derived),
        lexicons=lexicons,
        state_lexicons=states,
        patterns=patterns,
        context_window_s=int(doc.get("context_window_s", 300)),
        report_channels=report,
    )


def load_config(path) -> MachineConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def config_document(machine_id: str, channels, lexicons=(), patterns: Optional[dict] = None,
                    nominal_dt_seconds: int = 1, context_window_s: int = 300, **extra) -> dict:
    """Assemble a config document from library objects (inverse of the loader)."""
    doc = {
        "machine_id": machine_id,
        "nominal_dt_seconds": nominal_dt_seconds,
        "channels": [c.to_dict() for c in channels],
        "lexicons": [
            {
                "channel_id": lx.channel_id,
                "noun_bins": [[None if math.isinf(u) else u, l] for u, l in lx.noun_bins],
                "hysteresis": lx.hysteresis,
                "verb_naming": [[a, b, v] for (a, b), v in lx.verb_naming.items()],
                "adverb_bins": [[None if math.isinf(u) else u, l] for u, l in lx.adverb_bins],
                "adjective_rules": [
                    {"channel_id": r.channel_id, "comparator": r.comparator, "threshold": r.threshold,
                     "label": r.label, "key": r.key}
                    for r in lx.adjective_rules
                ],
                "pause_noun": lx.pause_noun,
                "pause_thresholds": list(lx.pause_thresholds),
            }
            for lx in lexicons
        ],
        "patterns": patterns or {},
        "context_window_s": context_window_s,
    }
    doc.update(extra)
    return doc
