"""Exception hierarchy.

Errors split into two families so the command line can map them onto exit
codes: bad or inconsistent input (exit 2) and metrics that are undefined for
otherwise valid input (exit 3).
"""


class XaidetError(Exception):
    pass


class InputError(XaidetError):
    """Input violates a stated precondition or invariant."""


class MetricUndefined(XaidetError):
    """A metric has no value for the given (valid) input."""


class ShapeMismatch(InputError):
    pass


class BadK(InputError):
    pass


class EmptySample(MetricUndefined):
    pass


class NotEvaluable(MetricUndefined):
    pass


class NoGroundTruth(MetricUndefined):
    pass


class NoPositiveRelevance(MetricUndefined):
    pass


class NothingToExplain(MetricUndefined):
    pass


class TooSmall(InputError):
    pass


class Diverged(XaidetError):
    pass


class ParseError(InputError):
    def __init__(self, msg, line=None, offset=None):
        if line is not None:
            msg = f"{msg} (line {line}, offset {offset})"
        super().__init__(msg)
        self.line = line
        self.offset = offset


class IntegrityError(InputError):
    pass


class FormatError(InputError):
    pass
