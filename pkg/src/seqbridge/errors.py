"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration and usage problems
exit 1, data and schema problems exit 2, numerical failures exit 3.
"""


class SeqBridgeError(Exception):
    """Base class for all package errors."""


class ConfigError(SeqBridgeError):
    """Invalid configuration value (bad dimension, fraction, flag)."""


class ShapeError(SeqBridgeError):
    """Array arguments with incompatible shapes or out-of-range indices."""


class DomainError(SeqBridgeError):
    """Operation undefined for the given input (e.g. single-chain ddG)."""


class DataError(SeqBridgeError):
    """Malformed dataset file or schema violation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PairingError(SeqBridgeError):
    """Preference-pair construction could not produce valid pools."""


class NumericalError(SeqBridgeError):
    """Non-finite loss or gradient encountered."""


class CorruptionError(DataError):
    """Checkpoint payload does not match its content hash."""


class VersionError(DataError):
    """Checkpoint format version is not recognized."""


class DegenerateInputError(SeqBridgeError):
    """Metric input too small or too uniform to be defined."""
