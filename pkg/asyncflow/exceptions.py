"""Error hierarchy shared by the engine and the management commands.

Every error carries the process exit code the CLI should use for it, so the
commands only need a single ``except AsyncFlowError`` to map failures.
"""
from __future__ import annotations


class AsyncFlowError(Exception):
    exit_code = 1


class ConfigurationError(AsyncFlowError):
    """Bad shapes, bad config values or unknown config keys."""

    exit_code = 2


class UsageError(AsyncFlowError):
    """An operation was called in the wrong order or on the wrong object."""

    exit_code = 2


class DomainError(AsyncFlowError):
    """An argument lies outside the mathematical domain of an operation."""

    exit_code = 2


class NumericError(AsyncFlowError):
    """NaN/Inf or an underflow that makes a result meaningless."""

    exit_code = 3


class CheckpointError(AsyncFlowError):
    exit_code = 4


class VersionError(CheckpointError):
    """A checkpoint does not match the model it is being loaded into."""
