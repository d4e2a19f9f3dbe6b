"""Pretext-contrastive self-supervised learning for video encoders."""
from importlib.resources import files

from .errors import (BoundsError, ConfigError, ContractError, DivergenceError, DomainError,
                     InputError, PCLError)

__version__ = "0.1.0"


def bundled_config(name: str):
    """Path of a config shipped with the package, e.g. ``"table4"``."""
    return files(__name__) / "configs" / f"{name}.yaml"


__all__ = ["PCLError", "BoundsError", "ConfigError", "ContractError", "DivergenceError",
           "DomainError", "InputError", "bundled_config", "__version__"]
