"""GoldFinch: a Finch-C2 / GOLD-attention hybrid language model on a small numpy autodiff core."""

from .cache import CompressedKeyCache, cache_bytes, cache_ratio, entries_per_token
from .config import ConfigError, ModelConfig
from .engine import InferenceEngine, Sampler, SessionState
from .io import load_checkpoint, save_checkpoint
from .model import Model, param_count
from .tensor import ContractError, DimensionError, Tape, Tensor

__all__ = [
    "CompressedKeyCache", "ConfigError", "ContractError", "DimensionError", "InferenceEngine",
    "Model", "ModelConfig", "Sampler", "SessionState", "Tape", "Tensor", "cache_bytes",
    "cache_ratio", "entries_per_token", "load_checkpoint", "param_count", "save_checkpoint",
]
__version__ = "0.1.0"
