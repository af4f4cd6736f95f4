"""Image + report classifier whose text input is optional at test time.

The array backend is numpy with a small tape-based autodiff (``tensor`` and
``ops``). Models live in ``model``; ``trainer`` runs training and the
experiments; ``corpus`` generates the synthetic data; ``cli`` is the entry point.
"""

from .errors import ConfigError, DimensionError, DivergenceError, FormatError, InputError, NumericError, TandemError
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "DivergenceError", "FormatError", "InputError", "NumericError",
    "TandemError", "Tensor", "no_grad",
]
