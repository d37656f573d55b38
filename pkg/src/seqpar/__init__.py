"""Sequence-parallel attention engines on a simulated collective fabric."""
from .attention import ENGINES, AttentionConfig, oracle_attention, sequence_parallel_attention
from .comm import CommFabric, CommStats, ConfigError, init_groups
from .model import ModelConfig, TinyDecoder
from .partition import ShardLayout, TrainBatch
from .training import Trainer, TrainerConfig, run_training

__version__ = "0.1.0"
