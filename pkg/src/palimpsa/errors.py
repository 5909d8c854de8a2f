"""Exception types shared across the package.

Exit-code mapping used by the CLI lives in cli.py; these classes only
classify failures.
"""


class PalimpsaError(Exception):
    """Base class for package errors."""


class DomainError(PalimpsaError, ValueError):
    """An argument is outside its mathematical domain (negative rate, etc.)."""


class RuleContractError(PalimpsaError, ValueError):
    """Input violates a step rule's contract (shape, sign, scalar-beta)."""


class NumericError(PalimpsaError, ArithmeticError):
    """A non-finite value or failed factorization appeared mid-computation.

    `where` carries a human-readable location such as "step 17" or
    "chunk 3, offset 7".
    """

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(message if where is None else f"{message} ({where})")


class ConfigError(PalimpsaError, ValueError):
    """Configuration document is malformed, has unknown keys, or bad values."""
