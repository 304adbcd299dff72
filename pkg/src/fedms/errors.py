"""Exception hierarchy shared across the package."""


class FedMSError(Exception):
    """Base class for all package errors."""


class ShapeError(FedMSError, ValueError):
    """Operand shapes do not conform."""


class ContractError(FedMSError, RuntimeError):
    """A documented precondition was violated."""


class DegenerateBatchError(ContractError):
    """Batch statistics requested on a batch that is too small."""


class InputError(FedMSError, ValueError):
    """Model input outside the accepted domain (e.g. out-of-vocab token)."""


class ConfigError(FedMSError, ValueError):
    """Invalid experiment configuration; message names the offending field."""


class IntegrityError(FedMSError, IOError):
    """A serialized artifact failed validation."""
