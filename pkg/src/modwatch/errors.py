"""Exception hierarchy shared across the package.

Every error raised on a user-facing path derives from ModwatchError so the
CLI can map failures onto stable exit codes (see cli.EXIT_CODES).
"""
from __future__ import annotations


class ModwatchError(Exception):
    """Base class for all package errors."""


class ConfigError(ModwatchError):
    """Invalid or contradictory configuration values."""


class ShapeError(ModwatchError):
    """Tensor or architecture dimensions do not line up."""


class DataError(ModwatchError):
    """Dataset contents violate a contract (labels, modules, splits, files)."""


class NumericError(ModwatchError):
    """Numeric failure: non-finite values, invalid reductions, spent tapes."""


class TrainingDiverged(NumericError):
    """Loss or gradients became non-finite during optimisation."""
