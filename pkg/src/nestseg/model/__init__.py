from .blocks import BlockedSequence, blockify, deblockify
from .config import ConfigError, ModelConfig, default_config, toy_config
from .network import ModelOutput, UNesT, build_model, init_icv_heads

__all__ = [
    "BlockedSequence",
    "ConfigError",
    "ModelConfig",
    "ModelOutput",
    "UNesT",
    "blockify",
    "build_model",
    "deblockify",
    "default_config",
    "init_icv_heads",
    "toy_config",
]
