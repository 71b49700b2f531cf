"""Finite-size scaling laboratory for transformer width, head and depth limits."""

from .diffcore import ContractError, ShapeError
from .model import ModelConfig, NumericError, Params, init_params
from .optim import OptimizerConfig, train

__all__ = ["ContractError", "ShapeError", "ModelConfig", "NumericError", "Params", "init_params",
           "OptimizerConfig", "train"]
__version__ = "0.1.0"
