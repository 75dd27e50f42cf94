"""Exception types shared across the simulator.

The CLI maps these onto process exit codes: usage/configuration problems
exit 1, I/O and dataset format problems exit 2, numeric divergence exits 3.
"""

from __future__ import annotations


class UsageError(ValueError):
    """A caller passed arguments outside an operation's contract."""


class ConfigurationError(UsageError):
    """Array shapes or config values are inconsistent with each other."""


class PartitionError(UsageError):
    """The dataset cannot satisfy the requested client partition."""


class DataFormatError(OSError):
    """A dataset file exists but its contents are malformed."""


class NumericDivergence(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
