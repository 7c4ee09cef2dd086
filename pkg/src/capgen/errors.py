"""Exception types shared across the package."""


class CapgenError(Exception):
    """Base class for every package-specific error."""


class ShapeError(CapgenError, ValueError):
    """Operands have incompatible shapes or ranks."""


class EmptyInputError(ShapeError):
    """An operation received an empty feature set or sequence."""


class DomainError(CapgenError, ValueError):
    """A value lies outside the mathematical domain of the operation."""


class ContractError(CapgenError, ValueError):
    """A documented precondition was violated by the caller."""


class VocabularyError(CapgenError, LookupError):
    """A token or token id is not covered by the vocabulary."""


class ConfigError(CapgenError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(CapgenError, ValueError):
    """A serialized file violates its declared binary or text format."""
