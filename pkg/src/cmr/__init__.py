"""Concept-based memory reasoner: a concept bottleneck model whose task head
selects and symbolically evaluates rules from a learned rulebook."""

from .datasets import Dataset, GeneratorSpec, generate
from .model import CMR, ModelConfig
from .rules import Rulebook, RolePin, SymbolicRule
from .trainkit import TrainConfig, evaluate, train

__all__ = [
    "CMR", "ModelConfig", "Dataset", "GeneratorSpec", "generate", "Rulebook", "RolePin",
    "SymbolicRule", "TrainConfig", "evaluate", "train",
]
