"""Reflection-aware KTO: policies, rewards, trainer, synthetic data and evaluation statistics."""
from .config import RunConfig, load_config
from .estimator import RKTOAligner
from .exceptions import (CapacityError, ConfigError, ConsistencyError, DecodeError, DimensionError,
                         DivergenceError, FormatError, InvalidInputError, NonFiniteError, ParseError,
                         RKTOError)
from .policy import Context, FeaturizedPolicy, TabularPolicy, Trace, snapshot
from .rewards import RewardConfig
from .synthdata import GenerationConfig, PreferenceExample, generate_dataset, read_dataset, split, write_dataset
from .trainer import TrainConfig, Trainer, run_training, theorem_check

__version__ = "0.1.0"
