"""Exception types shared across the package.

Contract violations (bad shapes, non-partition masks, malformed arguments)
raise plain ValueError; the classes below cover failures that callers are
expected to branch on, and the CLI maps them onto exit codes.
"""


class FlowscapeError(Exception):
    """Base class for package-specific failures."""


class DataError(FlowscapeError):
    """Missing or inconsistent input data (files, clips, references)."""


class FormatError(DataError):
    """A binary container is malformed (bad magic, truncated payload)."""


class EvaluationError(FlowscapeError):
    """A metric has no valid support (e.g. every pixel masked out)."""


class NumericError(FlowscapeError):
    """Non-finite values where finite ones are required; aborts the run."""
