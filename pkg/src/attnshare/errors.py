"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError/CapacityError/InputError -> 2,
ShapeError/NumericDomainError/ContractError -> 3.
"""


class AttnShareError(Exception):
    """Base class for all package errors."""


class ShapeError(AttnShareError):
    """Operand dimensions are incompatible."""


class NumericDomainError(AttnShareError):
    """An operation left its numeric domain (log of non-positive, overflow, ...)."""


class ContractError(AttnShareError):
    """A caller violated an operation's contract (non-scalar loss, non-deterministic f)."""


class ConfigError(AttnShareError):
    """A configuration is internally inconsistent or unusable for the request."""


class InputError(AttnShareError):
    """Runtime data is invalid (token id out of range, negative distribution, ...)."""


class CapacityError(AttnShareError):
    """A fixed capacity (max sequence length, cache size) would be exceeded."""
