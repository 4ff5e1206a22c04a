"""Symbolic pattern queries over token sequences.

Pattern grammar::

    seq   := term+
    term  := atom quant?
    atom  := token | '(' seq ('|' seq)* ')' | gap
    token := kind ':' label ('[' qual (',' qual)* ']')?
    kind  := 'noun' | 'verb' | 'punct' | 'state'
    qual  := key ('=' | '>' | '<') value
    gap   := '~{' int ',' int '}'
    quant := '*' | '+' | '?' | '{' int (',' int)? '}'

``label`` may be ``*``.  The qualifier key ``dur`` compares a token's
duration in seconds; any other key compares a qualifier string with ``=``.
A gap swallows any tokens whose wall-clock span (first start to last end)
lies within ``[min, max]`` seconds; a gap that swallows nothing spans 0 s.

Example: ``verb:start_slewing ~{0,30} verb:start_conveying``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Optional, Union

from .astsa import KINDS, SymbolSequence, SymbolToken
from .core import Timestamp, format_iso
from .errors import PatternSyntaxError

# --------------------------------------------------------------------- syntax


@dataclass(frozen=True)
class Qual:
    key: str
    op: str
    value: str

    def __str__(self):
        return f"{self.key}{self.op}{self.value}"


@dataclass(frozen=True)
class TokenPred:
    kind: str
    label: str
    quals: tuple = ()

    def __str__(self):
        text = f"{self.kind}:{self.label}"
        if self.quals:
            text += "[" + ",".join(str(q) for q in self.quals) + "]"
        return text

    def matches(self, tok: SymbolToken) -> bool:
        if tok.kind != self.kind or (self.label != "*" and tok.label != self.label):
            return False
        for q in self.quals:
            if q.key == "dur":
                limit = float(q.value)
                d = tok.duration_s
                if not (d == limit if q.op == "=" else d > limit if q.op == ">" else d < limit):
                    return False
            elif tok.qualifiers.get(q.key) != q.value:
                return False
        return True


@dataclass(frozen=True)
class Gap:
    lo: int
    hi: int

    def __str__(self):
        return f"~{{{self.lo},{self.hi}}}"


@dataclass(frozen=True)
class Seq:
    items: tuple

    def __str__(self):
        return " ".join(str(i) for i in self.items)


@dataclass(frozen=True)
class Alt:
    options: tuple

    def __str__(self):
        return "(" + " | ".join(str(o) for o in self.options) + ")"


@dataclass(frozen=True)
class Repeat:
    node: "PatternNode"
    lo: int
    hi: Optional[int]

    def __str__(self):
        if (self.lo, self.hi) == (0, None):
            q = "*"
        elif (self.lo, self.hi) == (1, None):
            q = "+"
        elif (self.lo, self.hi) == (0, 1):
            q = "?"
        elif self.lo == self.hi:
            q = f"{{{self.lo}}}"
        else:
            q = f"{{{self.lo},{self.hi}}}"
        return f"{self.node}{q}"


PatternNode = Union[TokenPred, Gap, Seq, Alt, Repeat]

_KIND_RE = re.compile(r"[a-z]+")
_LABEL_RE = re.compile(r"\*|[A-Za-z0-9_.\-]+")
_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_VALUE_RE = re.compile(r"[A-Za-z0-9_.+\-]+")
_INT_RE = re.compile(r"\d+")
_NUMBER_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?\Z")

MAX_REPEAT = 1000


class _PatternParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, expected: str, pos: Optional[int] = None):
        pos = self.pos if pos is None else pos
        found = repr(self.text[pos]) if pos < len(self.text) else "end of pattern"
        raise PatternSyntaxError(f"expected {expected}, found {found}", pos, self.text)

    def ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if not self.text.startswith(ch, self.pos):
            self.fail(repr(ch))
        self.pos += len(ch)

    def regex(self, rx, expected):
        m = rx.match(self.text, self.pos)
        if m is None:
            self.fail(expected)
        self.pos = m.end()
        return m.group(0)

    def integer(self) -> int:
        return int(self.regex(_INT_RE, "integer"))

    def seq(self, stop: str) -> Seq:
        items = []
        self.ws()
        while self.peek() and self.peek() not in stop:
            items.append(self.term())
            self.ws()
        if not items:
            self.fail("token, '(' or '~{'")
        return Seq(tuple(items))

    def term(self) -> PatternNode:
        atom = self.atom()
        start = self.pos
        self.ws()
        c = self.peek()
        if c == "*":
            self.pos += 1
            return Repeat(atom, 0, None)
        if c == "+":
            self.pos += 1
            return Repeat(atom, 1, None)
        if c == "?":
            self.pos += 1
            return Repeat(atom, 0, 1)
        if c == "{":
            self.pos += 1
            lo_pos = self.pos
            lo = self.integer()
            hi = lo
            if self.peek() == ",":
                self.pos += 1
                hi = self.integer()
            self.expect("}")
            if hi < lo or hi > MAX_REPEAT:
                self.fail(f"repeat bounds 0 <= min <= max <= {MAX_REPEAT}", lo_pos)
            return Repeat(atom, lo, hi)
        self.pos = start
        return atom

    def atom(self) -> PatternNode:
        c = self.peek()
        if c == "(":
            self.pos += 1
            options = [self.seq("|)")]
            while self.peek() == "|":
                self.pos += 1
                options.append(self.seq("|)"))
            self.expect(")")
            return Alt(tuple(options))
        if c == "~":
            self.pos += 1
            self.expect("{")
            lo_pos = self.pos
            lo = self.integer()
            self.expect(",")
            hi = self.integer()
            self.expect("}")
            if hi < lo:
                self.fail("gap bounds with min <= max", lo_pos)
            return Gap(lo, hi)
        return self.token()

    def token(self) -> TokenPred:
        kind_pos = self.pos
        m = _KIND_RE.match(self.text, self.pos)
        if m is None or m.group(0) not in KINDS:
            self.fail("token kind (noun, verb, punct, state), '(' or '~{'", kind_pos)
        self.pos = m.end()
        self.expect(":")
        label = self.regex(_LABEL_RE, "label")
        quals = []
        if self.peek() == "[":
            self.pos += 1
            quals.append(self.qual())
            while self.peek() == ",":
                self.pos += 1
                quals.append(self.qual())
            self.expect("]")
        return TokenPred(m.group(0), label, tuple(quals))

    def qual(self) -> Qual:
        key = self.regex(_KEY_RE, "qualifier key")
        op_pos = self.pos
        op = self.peek()
        if op not in ("=", ">", "<"):
            self.fail("'=', '>' or '<'")
        self.pos += 1
        value_pos = self.pos
        value = self.regex(_VALUE_RE, "qualifier value")
        if key == "dur":
            if not _NUMBER_RE.match(value):
                self.fail("numeric duration", value_pos)
        elif op != "=":
            self.fail("'=' (only 'dur' supports '<' and '>')", op_pos)
        return Qual(key, op, value)


# ------------------------------------------------------------------ automaton


class _State:
    __slots__ = ("id", "kind", "pred", "outs", "lo", "hi")

    def __init__(self, sid, kind, pred=None, outs=(), lo=0, hi=0):
        self.id = sid
        self.kind = kind  # "tok" | "eps" | "gap" | "match"
        self.pred = pred
        self.outs = list(outs)
        self.lo = lo
        self.hi = hi


class _Nfa:
    """Thompson-style automaton; gap states carry their own span bookkeeping."""

    def __init__(self, root: PatternNode):
        self.states: list[_State] = []
        self.accept = self._new("match")
        self.start = self._build(root, self.accept)

    def _new(self, kind, **kw) -> _State:
        s = _State(len(self.states), kind, **kw)
        self.states.append(s)
        return s

    def _build(self, node, nxt: _State) -> _State:
        if isinstance(node, TokenPred):
            return self._new("tok", pred=node, outs=[nxt])
        if isinstance(node, Gap):
            return self._new("gap", outs=[nxt], lo=node.lo, hi=node.hi)
        if isinstance(node, Seq):
            cur = nxt
            for item in reversed(node.items):
                cur = self._build(item, cur)
            return cur
        if isinstance(node, Alt):
            return self._new("eps", outs=[self._build(opt, nxt) for opt in node.options])
        if isinstance(node, Repeat):
            if node.hi is None:
                loop = self._new("eps")
                loop.outs = [self._build(node.node, loop), nxt]
                if node.lo == 0:
                    return loop
                return self._build(node.node, loop)
            cur = nxt
            for _ in range(node.hi - node.lo):
                cur = self._new("eps", outs=[self._build(node.node, cur), nxt])
            for _ in range(node.lo):
                cur = self._build(node.node, cur)
            return cur
        raise TypeError(f"unknown pattern node {node!r}")

    # a configuration is (state_id, gap_first_start, gap_max_end)

    def closure(self, configs) -> set:
        seen = set()
        stack = list(configs)
        states = self.states
        while stack:
            cfg = stack.pop()
            if cfg in seen:
                continue
            seen.add(cfg)
            st = states[cfg[0]]
            if st.kind == "eps":
                stack.extend((o.id, None, None) for o in st.outs)
            elif st.kind == "gap":
                first, last = cfg[1], cfg[2]
                span = 0 if first is None else last - first
                if st.lo <= span <= st.hi:
                    stack.append((st.outs[0].id, None, None))
        return seen

    def step(self, configs, tok: SymbolToken) -> set:
        moved = []
        states = self.states
        for sid, first, last in configs:
            st = states[sid]
            if st.kind == "tok":
                if st.pred.matches(tok):
                    moved.append((st.outs[0].id, None, None))
            elif st.kind == "gap":
                f = tok.t_start if first is None else first
                e = tok.t_end if last is None else max(last, tok.t_end)
                if e - f <= st.hi:
                    moved.append((sid, f, e))
        return self.closure(moved)

    def accepts(self, configs) -> bool:
        return any(sid == self.accept.id for sid, _, _ in configs)


@dataclass(frozen=True)
class Match:
    first_token_index: int
    last_token_index: int
    t_start: Timestamp
    t_end: Timestamp

    def to_dict(self) -> dict:
        return {
            "t_start": format_iso(self.t_start),
            "t_end": format_iso(self.t_end),
            "first_token_index": self.first_token_index,
            "last_token_index": self.last_token_index,
        }


class Pattern:
    """A compiled symbolic pattern; immutable and safe to share."""

    def __init__(self, text: str, root: PatternNode):
        self.text = text
        self.root = root
        self._nfa = _Nfa(root)
        self._start = frozenset(self._nfa.closure([(self._nfa.start.id, None, None)]))

    def __str__(self):
        return str(self.root)

    def __repr__(self):
        return f"Pattern({str(self)!r})"

    def __eq__(self, other):
        return isinstance(other, Pattern) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    @property
    def n_states(self) -> int:
        return len(self._nfa.states)

    def shortest_from(self, tokens, i: int) -> Optional[int]:
        """Index of the last token of the shortest match starting at ``i``."""
        nfa = self._nfa
        configs = self._start
        for j in range(i, len(tokens)):
            configs = nfa.step(configs, tokens[j])
            if not configs:
                return None
            if nfa.accepts(configs):
                return j
        return None


def parse_pattern(text: str) -> Pattern:
    p = _PatternParser(text)
    root = p.seq("")
    if p.pos != len(text):
        p.fail("token, '(' or '~{'")
    return Pattern(text, root)


def find_matches(pattern: Pattern, seq: SymbolSequence) -> list[Match]:
    """Leftmost, non-overlapping matches; the shortest one wins at each start.

    Every match consumes at least one token.
    """
    tokens = seq.tokens if isinstance(seq, SymbolSequence) else tuple(seq)
    out = []
    i = 0
    n = len(tokens)
    while i < n:
        j = pattern.shortest_from(tokens, i)
        if j is None:
            i += 1
            continue
        out.append(Match(i, j, tokens[i].t_start, tokens[j].t_end))
        i = j + 1
    return out


def matches_to_ndjson(pattern: Pattern, matches) -> str:
    return "".join(json.dumps({"pattern": pattern.text, **m.to_dict()}) + "\n" for m in matches)
