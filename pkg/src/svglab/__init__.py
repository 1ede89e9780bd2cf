"""Class-separable latent spaces for few-step flow matching on synthetic shapes."""
from .errors import (ConfigError, ContractError, FormatError, NumericError, ShapeError,
                     SvgLabError, TrainingDivergedError, UsageError)
from .latentspace import BaselineCodec, ChannelStats, SemanticEncoder, SvgCodec
from .flowmodel import FlowMatcher, TrainConfig, VelocityNet, train_flow, velocity_init
from .sampler import EditConfig, SamplerConfig, euler_sample, masked_edit

__version__ = "0.1.0"

__all__ = [
    "BaselineCodec", "ChannelStats", "ConfigError", "ContractError", "EditConfig", "FlowMatcher",
    "FormatError", "NumericError", "SamplerConfig", "SemanticEncoder", "ShapeError", "SvgCodec",
    "SvgLabError", "TrainConfig", "TrainingDivergedError", "UsageError", "VelocityNet",
    "euler_sample", "masked_edit", "train_flow", "velocity_init",
]
