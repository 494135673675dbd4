"""Numerics, encoding and the BMLP model."""

from .encoding import AuxSubsequences, EmbeddingTables, HeteroSequence, Variant, Vocab
from .model import Ablation, HyperParams, ModelParams, TrainingInstance
from .numerics import AdamState, Mode, RngStream

__all__ = [
    "Ablation", "AdamState", "AuxSubsequences", "EmbeddingTables", "HeteroSequence",
    "HyperParams", "Mode", "ModelParams", "RngStream", "TrainingInstance", "Variant", "Vocab",
]
