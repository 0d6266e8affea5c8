"""Exception types raised across the package."""


class EDPNError(Exception):
    """Base class for all package errors."""


class ShapeError(EDPNError, ValueError):
    """A tensor shape violates an operation's contract.

    ``dim`` names the offending dimension (e.g. ``"in_ch"``, ``"H"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(EDPNError, ValueError):
    """Invalid configuration key, value or cross-field combination."""

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


class FormatError(EDPNError, ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        super().__init__(f"{message} at byte {offset}" if offset is not None else message)
        self.offset = offset


class TrainingError(EDPNError, RuntimeError):
    """Training diverged (non-finite loss) or was given unusable data."""
