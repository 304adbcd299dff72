"""FedMS: federated foundation models with sparse LoRA activation and a gated mixture of experts."""

from .errors import (ConfigError, ContractError, DegenerateBatchError, FedMSError, InputError,
                     IntegrityError, ShapeError)

__version__ = "0.1.0"

__all__ = ["FedMSError", "ShapeError", "ContractError", "DegenerateBatchError", "InputError",
           "ConfigError", "IntegrityError", "__version__"]
