"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage errors are raised as
``UsageError`` (exit 1), malformed or inconsistent inputs as ``DataError``
(exit 2), and numerical breakdowns as ``NumericError`` (exit 3).
"""


class HetdiarError(Exception):
    """Base class for all toolkit errors."""


class UsageError(HetdiarError):
    """Invalid invocation: bad flags, missing arguments, bad config keys."""


class DataError(HetdiarError):
    """Malformed or inconsistent input data (files, matrices, labels)."""


class NumericError(HetdiarError):
    """Numerical failure: non-finite values, singular systems, divergence."""
