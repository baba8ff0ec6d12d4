"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
PhaseError -> 4.
"""


class PropinfError(Exception):
    """Base class for package errors."""


class ConfigError(PropinfError):
    """Invalid or inconsistent experiment configuration."""


class DataError(PropinfError):
    """Malformed input data (graph files, attribute tables).

    `code` carries a short machine-readable tag, e.g. "missing-file",
    "ragged-attributes", "bad-endpoint".
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class PhaseError(PropinfError):
    """A pipeline phase failed irrecoverably."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
