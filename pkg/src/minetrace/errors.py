"""Exception hierarchy shared by all minetrace modules."""


class MinetraceError(Exception):
    """Base class for all errors raised by this package."""


class MismatchedInterval(MinetraceError, ValueError):
    """Two series with different nominal sample intervals were combined."""


class FormatError(MinetraceError, ValueError):
    """A packet or file could not be decoded."""


class SchemaError(MinetraceError, ValueError):
    """A document is well-formed but misses or misuses required fields."""


class IntervalError(MinetraceError, ValueError):
    """Rows or chunks do not lie on the nominal sampling grid."""


class QcRejected(MinetraceError, ValueError):
    """A packet with fatal quality-control violations was offered for merging."""


class OverwriteConflict(MinetraceError):
    """A chunk on disk holds present values that a write would change."""


class UnknownChannel(MinetraceError, KeyError):
    """A channel id could not be resolved."""

    def __str__(self):
        return Exception.__str__(self)


class UnknownConstant(MinetraceError, KeyError):
    """A ``meta.<name>`` reference has no value in the constant table."""

    def __str__(self):
        return Exception.__str__(self)


class ParseError(MinetraceError, ValueError):
    """Syntax error carrying the 0-based character offset of the failure."""

    def __init__(self, message, offset, text=""):
        super().__init__(f"{message} at offset {offset}")
        self.message = message
        self.offset = offset
        self.text = text


class ExpressionSyntaxError(ParseError):
    pass


class PatternSyntaxError(ParseError):
    pass


class LexiconMismatch(MinetraceError, ValueError):
    pass


class ArityMismatch(MinetraceError, ValueError):
    pass


class BrokenTiling(MinetraceError, AssertionError):
    """Noun/state tokens overlap or are out of order."""


class InsufficientData(MinetraceError, ValueError):
    pass


class BinWidthError(MinetraceError, ValueError):
    pass


class SpecError(MinetraceError, ValueError):
    """Invalid synthetic scenario description."""


class ConfigError(MinetraceError, ValueError):
    """Invalid machine configuration; the message names the offending path."""
