"""Cross-modal common-manifold retrieval on synthetic backbone features."""

__version__ = "0.1.0"

from .evaluation import ProtocolError, evaluate, rank_k_accuracy
from .model import Variant, init_model
from .numerics import ContractError, DimensionError, Tensor, backward
from .synthgen import ConfigError, FormatError, GeneratorConfig, generate_dataset, split_dataset
from .training import HyperParams, NumericError, train

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FormatError",
    "GeneratorConfig",
    "HyperParams",
    "NumericError",
    "ProtocolError",
    "Tensor",
    "Variant",
    "backward",
    "evaluate",
    "generate_dataset",
    "init_model",
    "rank_k_accuracy",
    "split_dataset",
    "train",
]
