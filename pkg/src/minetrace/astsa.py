"""Linguistic symbolization of channels.

A :class:`Lexicon` turns one channel into a token sequence:

* **nouns** name the state the value is in (threshold bins with hysteresis),
* **verbs** mark each committed state change, qualified by an **adverb**
  that grades the one-step slope at the transition,
* **adjectives** qualify a noun from predicates evaluated at its start,
* **punctuation** follows every run of the idle noun, classed by length as
  ``comma``, ``semicolon`` or ``full_stop``.

Several symbolized channels can be fused into machine **states** through a
:class:`StateLexicon`.
"""

from __future__ import annotations

import json
import math
import operator
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import Series, Stream, TimeRange, Timestamp, format_iso, parse_iso
from .errors import ArityMismatch, BrokenTiling, LexiconMismatch, MismatchedInterval

NOUN, VERB, PUNCT, STATE = "noun", "verb", "punct", "state"
KINDS = (NOUN, VERB, PUNCT, STATE)

_COMPARATORS = {
    ">": operator.gt,
    "<": operator.lt,
    ">=": operator.ge,
    "<=": operator.le,
    "==": operator.eq,
}


@dataclass(frozen=True)
class SymbolToken:
    kind: str
    label: str
    t_start: Timestamp
    duration_s: int
    qualifiers: Mapping[str, str] = field(default_factory=dict)

    @property
    def t_end(self) -> Timestamp:
        return self.t_start + self.duration_s

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "label": self.label,
            "t_start": format_iso(self.t_start),
            "duration_s": self.duration_s,
            "qualifiers": dict(self.qualifiers),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SymbolToken":
        return cls(d["kind"], d["label"], parse_iso(d["t_start"]), int(d["duration_s"]),
                   dict(d.get("qualifiers", {})))


@dataclass(frozen=True)
class SymbolSequence:
    source: str
    dt_seconds: int
    tokens: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def labels(self, kind: Optional[str] = None) -> list[str]:
        return [t.label for t in self.tokens if kind is None or t.kind == kind]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(t.to_dict()) + "\n" for t in self.tokens)

    @classmethod
    def from_ndjson(cls, text: str, source: str, dt_seconds: int) -> "SymbolSequence":
        tokens = [SymbolToken.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(source, dt_seconds, tokens)


@dataclass(frozen=True)
class AdjectiveRule:
    """Attach ``key=label`` to a noun when ``channel <comparator> threshold`` at its start."""

    channel_id: str
    comparator: str
    threshold: float
    label: str
    key: str = "adj"

    def __post_init__(self):
        if self.comparator not in _COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")

    def holds(self, value: float) -> bool:
        return _COMPARATORS[self.comparator](value, self.threshold)


def _check_bins(bins, what):
    uppers = [float(u) for u, _ in bins]
    if not uppers:
        raise ValueError(f"{what} must not be empty")
    if any(b <= a for a, b in zip(uppers, uppers[1:])):
        raise ValueError(f"{what} upper bounds must be strictly increasing")
    if uppers[-1] != math.inf:
        raise ValueError(f"last {what} upper bound must be +inf")
    return np.array(uppers)


@dataclass(frozen=True)
class Lexicon:
    """Vocabulary for one channel.

    ``noun_bins`` is a list of ``(upper_bound, label)``; a value belongs to the
    first bin whose upper bound it does not exceed.  ``adverb_bins`` grades
    ``|slope|`` (units per second) the same way.
    """

    channel_id: str
    noun_bins: tuple
    hysteresis: float = 0.0
    verb_naming: Mapping[tuple, str] = field(default_factory=dict)
    adverb_bins: tuple = ()
    adjective_rules: tuple = ()
    pause_noun: Optional[str] = None
    pause_thresholds: tuple = (60, 600)

    def __post_init__(self):
        object.__setattr__(self, "noun_bins", tuple((float(u), str(l)) for u, l in self.noun_bins))
        object.__setattr__(self, "adverb_bins", tuple((float(u), str(l)) for u, l in self.adverb_bins))
        object.__setattr__(self, "adjective_rules", tuple(self.adjective_rules))
        object.__setattr__(self, "verb_naming", {tuple(k): v for k, v in dict(self.verb_naming).items()})
        object.__setattr__(self, "pause_thresholds", tuple(self.pause_thresholds))
        uppers = _check_bins(self.noun_bins, "noun_bins")
        if self.adverb_bins:
            _check_bins(self.adverb_bins, "adverb_bins")
        comma, semicolon = self.pause_thresholds
        if not comma < semicolon:
            raise ValueError("pause_thresholds need comma_max_s < semicolon_max_s")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be nonnegative")
        widths = np.diff(uppers[:-1])
        if widths.size and not self.hysteresis < widths.min():
            raise ValueError(f"hysteresis {self.hysteresis} must be below the smallest bin width {widths.min()}")

    @property
    def uppers(self) -> np.ndarray:
        return np.array([u for u, _ in self.noun_bins])

    @property
    def labels(self) -> list[str]:
        return [l for _, l in self.noun_bins]

    def noun_of(self, value: float) -> str:
        return self.labels[int(np.searchsorted(self.uppers, value, side="left"))]

    def verb_for(self, src: str, dst: str) -> str:
        return self.verb_naming.get((src, dst), f"goto_{dst}")

    def adverb_for(self, slope: float) -> Optional[str]:
        if not self.adverb_bins:
            return None
        uppers = [u for u, _ in self.adverb_bins]
        return self.adverb_bins[int(np.searchsorted(uppers, abs(slope), side="left"))][1]

    def punct_class(self, duration_s: int) -> str:
        comma, semicolon = self.pause_thresholds
        if duration_s <= comma:
            return "comma"
        if duration_s <= semicolon:
            return "semicolon"
        return "full_stop"


def _first_exceedance(vals: np.ndarray, start: int, lo: float, hi: float) -> int:
    """Index of the first ``vals[j] > hi or vals[j] <= lo`` with ``j >= start``, or -1."""
    n = vals.shape[0]
    block = 256
    pos = start
    while pos < n:
        seg = vals[pos : pos + block]
        hit = (seg > hi) | (seg <= lo)
        if hit.any():
            return pos + int(hit.argmax())
        pos += block
        block = min(block * 4, 1 << 20)
    return -1


def committed_bins(values: np.ndarray, uppers: np.ndarray, hysteresis: float) -> np.ndarray:
    """Bin index per value after hysteresis, for a run of present values.

    Bin ``k`` stays admissible while the value lies in
    ``(lower_k - h, upper_k + h]``.  The committed bin is kept for as long
    as it is admissible; when it is not (the value passed one of its
    boundaries by more than ``h``), the admissible bin that remains
    admissible for the longest stretch is committed next, preferring the
    plain bin of the value on ties.  This greedy choice yields the fewest
    bin changes, so widening ``h`` can never add changes.  With ``h == 0``
    the result is plain binning.
    """
    raw = np.searchsorted(uppers, values, side="left")
    n = values.shape[0]
    if hysteresis == 0 or n == 0:
        return raw
    lowers = np.concatenate(([-np.inf], uppers[:-1]))
    lo_adm = np.searchsorted(uppers, values - hysteresis, side="left")
    hi_adm = np.searchsorted(uppers, values + hysteresis, side="left")

    def reach(k, start):
        j = _first_exceedance(values, start, lowers[k] - hysteresis, uppers[k] + hysteresis)
        return n if j < 0 else j

    out = np.empty_like(raw)
    pos = 0
    while pos < n:
        best_k, best_end = -1, -1
        for k in range(int(lo_adm[pos]), int(hi_adm[pos]) + 1):
            end = reach(k, pos + 1)
            if end > best_end or (end == best_end and k == raw[pos]):
                best_k, best_end = k, end
        out[pos:best_end] = best_k
        pos = best_end
    return out


def _lookup(series_or_none: Optional[Series], t: Timestamp) -> float:
    if series_or_none is None:
        return math.nan
    s = series_or_none
    off = t - s.t0
    if off < 0 or off % s.dt_seconds:
        return math.nan
    i = off // s.dt_seconds
    return float(s.values[i]) if i < len(s) else math.nan


def symbolize(series: Series, lex: Lexicon, context: Optional[Stream | Mapping[str, Series]] = None) -> SymbolSequence:
    """Convert ``series`` into a :class:`SymbolSequence` under ``lex``.

    ``context`` supplies the channels referenced by adjective rules other
    than the symbolized one.  The committed state survives data gaps: a gap
    ends the current noun token, and a verb is emitted at the first sample
    after the gap only if the state changed.
    """
    if series.meta.channel_id != lex.channel_id:
        raise LexiconMismatch(f"lexicon is for {lex.channel_id!r}, series is {series.meta.channel_id!r}")
    dt = series.dt_seconds
    idx = np.flatnonzero(~np.isnan(series.values))
    if idx.size == 0:
        return SymbolSequence(lex.channel_id, dt, ())
    vals = series.values[idx]
    labels = lex.labels
    bins = committed_bins(vals, lex.uppers, lex.hysteresis)

    changed = np.zeros(idx.size, dtype=bool)
    changed[1:] = bins[1:] != bins[:-1]
    starts = changed.copy()
    starts[0] = True
    starts[1:] |= idx[1:] != idx[:-1] + 1
    token_starts = np.flatnonzero(starts)
    token_ends = np.append(token_starts[1:], idx.size)  # exclusive, in present-sample positions

    channels = dict(context.channels if isinstance(context, Stream) else (context or {}))
    channels[lex.channel_id] = series

    tokens: list[SymbolToken] = []
    for a, b in zip(token_starts.tolist(), token_ends.tolist()):
        t_start = series.t0 + int(idx[a]) * dt
        label = labels[bins[a]]
        if changed[a]:
            gap = int(idx[a] - idx[a - 1]) * dt
            slope = (float(vals[a]) - float(vals[a - 1])) / gap
            adverb = lex.adverb_for(slope)
            tokens.append(SymbolToken(
                VERB, lex.verb_for(labels[bins[a - 1]], label), t_start, dt,
                {"adverb": adverb} if adverb is not None else {},
            ))
        quals: dict = {}
        for rule in lex.adjective_rules:
            if rule.key in quals:
                continue
            v = _lookup(channels.get(rule.channel_id), t_start)
            if not math.isnan(v) and rule.holds(v):
                quals[rule.key] = rule.label
        duration = int(idx[b - 1] - idx[a] + 1) * dt
        tokens.append(SymbolToken(NOUN, label, t_start, duration, quals))
        if lex.pause_noun is not None and label == lex.pause_noun:
            cls = lex.punct_class(duration)
            tokens.append(SymbolToken(PUNCT, cls, t_start, duration, {"class": cls}))
    return SymbolSequence(lex.channel_id, dt, tokens)


@dataclass(frozen=True)
class StateLexicon:
    """Maps tuples of per-channel noun labels to machine-state labels."""

    id: str
    inputs: tuple
    mapping: Mapping[tuple, str]
    default_label: str = "other"

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        mapping = {tuple(k): v for k, v in dict(self.mapping).items()}
        for key in mapping:
            if len(key) != len(self.inputs):
                raise ArityMismatch(f"state key {key} has arity {len(key)}, expected {len(self.inputs)}")
        object.__setattr__(self, "mapping", mapping)

    def state_of(self, nouns: tuple) -> str:
        return self.mapping.get(tuple(nouns), self.default_label)


def _noun_codes(seq: SymbolSequence, t_lo: Timestamp, n: int, vocab: dict) -> np.ndarray:
    codes = np.full(n, -1, dtype=np.int64)
    dt = seq.dt_seconds
    for tok in seq.tokens:
        if tok.kind not in (NOUN, STATE):
            continue
        code = vocab.setdefault(tok.label, len(vocab))
        a = (tok.t_start - t_lo) // dt
        codes[a : a + tok.duration_s // dt] = code
    return codes


def fuse_states(sequences: Sequence[SymbolSequence], slex: StateLexicon) -> SymbolSequence:
    """Combine per-channel noun sequences into one run-length encoded state sequence.

    Instants where any input has no noun stay uncovered.
    """
    if len(sequences) != len(slex.inputs):
        raise ArityMismatch(f"{slex.id} expects {len(slex.inputs)} inputs, got {len(sequences)}")
    for seq, cid in zip(sequences, slex.inputs):
        if seq.source != cid:
            raise LexiconMismatch(f"{slex.id}: expected input {cid!r}, got {seq.source!r}")
    dts = {seq.dt_seconds for seq in sequences}
    if len(dts) != 1:
        raise MismatchedInterval(f"inputs differ in dt: {sorted(dts)}")
    dt = dts.pop()
    spans = [(t.t_start, t.t_end) for seq in sequences for t in seq.tokens if t.kind in (NOUN, STATE)]
    if not spans:
        return SymbolSequence(slex.id, dt, ())
    t_lo = min(s for s, _ in spans)
    t_hi = max(e for _, e in spans)
    n = (t_hi - t_lo) // dt

    vocabs = [dict() for _ in sequences]
    codes = [_noun_codes(seq, t_lo, n, vocab) for seq, vocab in zip(sequences, vocabs)]
    valid = np.logical_and.reduce([c >= 0 for c in codes])

    # mixed-radix code per instant, then one dict lookup per distinct tuple
    combined = np.zeros(n, dtype=np.int64)
    for c, vocab in zip(codes, vocabs):
        combined = combined * max(len(vocab), 1) + np.maximum(c, 0)
    combined[~valid] = -1
    names = [{code: label for label, code in vocab.items()} for vocab in vocabs]
    radices = [max(len(v), 1) for v in vocabs]

    def decode(value):
        parts = []
        for radix, name in zip(reversed(radices), reversed(names)):
            value, digit = divmod(value, radix)
            parts.append(name[digit])
        return tuple(reversed(parts))

    state_names: list[str] = []
    state_index: dict[str, int] = {}
    uniq, inverse = np.unique(combined, return_inverse=True)
    lut = np.empty(uniq.size, dtype=np.int64)
    for i, u in enumerate(uniq.tolist()):
        if u < 0:
            lut[i] = -1
            continue
        label = slex.state_of(decode(u))
        lut[i] = state_index.setdefault(label, len(state_index))
        if lut[i] == len(state_names):
            state_names.append(label)
    states = lut[inverse.reshape(-1)]

    boundary = np.ones(n, dtype=bool)
    boundary[1:] = states[1:] != states[:-1]
    starts = np.flatnonzero(boundary)
    ends = np.append(starts[1:], n)
    tokens = [
        SymbolToken(STATE, state_names[states[a]], t_lo + a * dt, (b - a) * dt)
        for a, b in zip(starts.tolist(), ends.tolist())
        if states[a] >= 0
    ]
    return SymbolSequence(slex.id, dt, tokens)


def reconstruct_partition(seq: SymbolSequence) -> list[TimeRange]:
    """Time ranges of the noun/state tokens, checking they are ordered and disjoint."""
    out: list[TimeRange] = []
    for tok in seq.tokens:
        if tok.kind not in (NOUN, STATE):
            continue
        if tok.duration_s < seq.dt_seconds:
            raise BrokenTiling(f"{tok.kind} token at {format_iso(tok.t_start)} shorter than dt")
        rng = TimeRange(tok.t_start, tok.t_end)
        if out and rng.start < out[-1].end:
            raise BrokenTiling(f"token at {format_iso(rng.start)} overlaps previous ending {format_iso(out[-1].end)}")
        out.append(rng)
    return out
