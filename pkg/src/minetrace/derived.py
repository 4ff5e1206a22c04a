"""Derived channels: sample-wise arithmetic over channels and metadata constants.

Grammar::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := ['-'] (number | ident | 'meta.' ident | '(' expr ')')

A hydraulic cylinder force, for instance, is declared as
``pressure_bar * 1e5 * meta.piston_area_m2``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .core import ChannelMeta, Series, Stream
from .errors import ExpressionSyntaxError, UnknownChannel, UnknownConstant


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class ChannelRef:
    name: str


@dataclass(frozen=True)
class MetaRef:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Number, ChannelRef, MetaRef, Neg, BinOp]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<meta>meta\.(?P<mname>[A-Za-z_][A-Za-z0-9_]*))"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionSyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        start = pos
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), start))
        elif m.group("meta") is not None:
            tokens.append(("meta", m.group("mname"), start))
        elif m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), start))
        else:
            tokens.append(("op", m.group("op"), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message):
        raise ExpressionSyntaxError(message, self.peek()[2], self.text)

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.take()[1]
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.primary())
        return self.primary()

    def primary(self) -> Node:
        kind, value, _ = self.peek()
        if kind == "num":
            self.take()
            return Number(float(value))
        if kind == "meta":
            self.take()
            return MetaRef(value)
        if kind == "ident":
            self.take()
            return ChannelRef(value)
        if (kind, value) == ("op", "("):
            self.take()
            node = self.expr()
            if self.peek()[:2] != ("op", ")"):
                self.fail("expected ')'")
            self.take()
            return node
        self.fail("expected number, identifier or '('")


def parse_expression(text: str) -> Node:
    """Parse ``text`` into an expression tree; raises :class:`ExpressionSyntaxError`."""
    p = _Parser(text)
    node = p.expr()
    if p.peek()[0] != "end":
        p.fail("expected operator or end of expression")
    return node


def unparse(node: Node) -> str:
    """Fully parenthesized text that parses back to an equal tree."""
    if isinstance(node, Number):
        return repr(node.value)
    if isinstance(node, ChannelRef):
        return node.name
    if isinstance(node, MetaRef):
        return f"meta.{node.name}"
    if isinstance(node, Neg):
        return f"-({unparse(node.operand)})"
    return f"({unparse(node.left)} {node.op} {unparse(node.right)})"


def references(node: Node) -> tuple[set, set]:
    """Channel ids and meta constant names referenced by ``node``."""
    chans, consts = set(), set()

    def walk(n):
        if isinstance(n, ChannelRef):
            chans.add(n.name)
        elif isinstance(n, MetaRef):
            consts.add(n.name)
        elif isinstance(n, Neg):
            walk(n.operand)
        elif isinstance(n, BinOp):
            walk(n.left)
            walk(n.right)

    walk(node)
    return chans, consts


@dataclass(frozen=True)
class DerivedSpec:
    output: ChannelMeta
    expression: str
    constants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.output.kind != "derived":
            raise ValueError(f"{self.output.channel_id}: derived output must have kind='derived'")
        object.__setattr__(self, "tree", parse_expression(self.expression))

    @property
    def inputs(self) -> list[str]:
        return sorted(references(self.tree)[0])


def _eval(node: Node, columns: Mapping[str, np.ndarray], constants: Mapping[str, float], n: int):
    if isinstance(node, Number):
        return node.value
    if isinstance(node, ChannelRef):
        try:
            return columns[node.name]
        except KeyError:
            raise UnknownChannel(f"expression references unknown channel {node.name!r}") from None
    if isinstance(node, MetaRef):
        try:
            return float(constants[node.name])
        except KeyError:
            raise UnknownConstant(f"expression references unknown constant meta.{node.name}") from None
    if isinstance(node, Neg):
        return -_eval(node.operand, columns, constants, n)
    left = _eval(node.left, columns, constants, n)
    right = _eval(node.right, columns, constants, n)
    if node.op == "/":
        left = np.broadcast_to(np.asarray(left, dtype=np.float64), (n,))
        right = np.broadcast_to(np.asarray(right, dtype=np.float64), (n,))
        out = np.full(n, np.nan)
        np.divide(left, right, out=out, where=right != 0)
    else:
        out = _ARITH[node.op](left, right)
    # an overflowed intermediate is missing, so later ops cannot launder it
    return np.where(np.isfinite(out), out, np.nan)


_ARITH = {"+": np.add, "-": np.subtract, "*": np.multiply}


def evaluate(spec: DerivedSpec, stream: Stream) -> Series:
    """Evaluate ``spec`` sample by sample on the grid of ``stream``.

    A sample is missing where any referenced input is missing, where a
    division by zero occurs, or where the result overflows.
    """
    n = stream.length
    columns = {cid: s.values for cid, s in stream.channels.items()}
    with np.errstate(all="ignore"):
        result = _eval(spec.tree, columns, spec.constants, n)
        values = np.array(np.broadcast_to(np.asarray(result, dtype=np.float64), (n,)))
    values[~np.isfinite(values)] = np.nan
    return Series(spec.output, stream.t0, stream.dt_seconds, values)
