"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, DivergenceError -> 4. Everything else is a plain bug.
"""


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(Exception):
    """Input data that cannot be loaded or fails an integrity check."""

    exit_code = 3


class ParseError(DataError):
    """Malformed record in an input file."""


class SchemaError(DataError):
    """Structurally valid file with missing or mistyped columns/fields."""


class IntegrityError(DataError):
    """Referential or semantic violation (dangling ids, inverted intervals)."""


class SeriesTooShortError(DataError):
    """Price file below the configured minimum row count."""


class DivergenceError(Exception):
    """Training produced a non-finite loss and was aborted."""

    exit_code = 4
