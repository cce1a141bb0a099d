"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: input problems -> 1, numeric
failures -> 2, model inconsistencies (arbitrage, empty domains) -> 3.
"""

from __future__ import annotations


class TreePriceError(Exception):
    """Base class for all package-specific errors."""


class InputError(TreePriceError, ValueError):
    """Invalid parameters, malformed configs, violated preconditions."""


class ConfigError(InputError):
    """Config-file parse error with a line/field-precise message."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field '{field}': "
        super().__init__(prefix + message)


class ModelInconsistencyError(TreePriceError):
    """The model admits no consistent price system (e.g. empty value-function domain)."""

    def __init__(self, message: str, node: tuple[int, int] | None = None):
        self.node = node
        if node is not None:
            message = f"{message} (node t={node[0]}, index={node[1]})"
        super().__init__(message)


class ArbitrageError(ModelInconsistencyError):
    """Robust no-arbitrage fails; carries the first violating node."""


class PathDependenceError(InputError):
    """A path-dependent payment stream was used with a recombinant lattice."""


class NumericError(TreePriceError):
    """A numeric procedure failed to meet its tolerance."""
