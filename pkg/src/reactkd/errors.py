"""Exception families shared across the package.

Each family carries the process exit code the CLI uses when it escapes a
subcommand, so callers can tell failures apart without parsing messages.
"""


class ReactKDError(Exception):
    exit_code = 1


class MissingInputError(ReactKDError, FileNotFoundError):
    exit_code = 3


class FormatError(ReactKDError, ValueError):
    """Malformed file: bad sidecar, length mismatch, non-finite payload."""

    exit_code = 4


class DegenerateInputError(ReactKDError, ValueError):
    """Input is well formed but numerically unusable (constant volume, zero-norm feature)."""

    exit_code = 5


class EmptyLiverError(DegenerateInputError):
    pass


class ShapeMismatchError(ReactKDError, ValueError):
    exit_code = 6


class ConfigError(ReactKDError, ValueError):
    """Parameters that cannot produce a meaningful result."""

    exit_code = 7


class NotApplicableError(ConfigError):
    """A loss term is undefined for this input pair (e.g. node counts differ)."""


class DivergenceError(ReactKDError, FloatingPointError):
    exit_code = 8


EXIT_CODES = {
    "success": 0,
    "usage": 2,
    "missing-input": MissingInputError.exit_code,
    "format": FormatError.exit_code,
    "degenerate-input": DegenerateInputError.exit_code,
    "shape-mismatch": ShapeMismatchError.exit_code,
    "configuration": ConfigError.exit_code,
    "divergence": DivergenceError.exit_code,
}
