"""Error taxonomy shared by the library and the command line.

Every raised error carries a stable ``category`` string so the CLI can
emit a single machine-parsable line without inspecting types.
"""


class GamreidError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ConfigError(GamreidError):
    """Invalid configuration value, unknown key, or inconsistent settings."""

    category = "config"


class ShapeError(GamreidError):
    """Tensor rank or extent mismatch."""

    category = "shape"


class FormatError(GamreidError):
    """Malformed file: bad magic, bad header, or truncated payload."""

    category = "format"


class IntegrityError(GamreidError):
    """State that is internally inconsistent, such as stale indices."""

    category = "integrity"


class UsageError(GamreidError):
    """API or CLI misuse: bad argument combinations, out-of-range indices."""

    category = "usage"


class ParseError(GamreidError):
    """Unparseable text input, such as a dataset filename."""

    category = "parse"


class NumericError(GamreidError):
    """Non-finite values where finite ones are required, such as NaN gradients."""

    category = "numeric"
