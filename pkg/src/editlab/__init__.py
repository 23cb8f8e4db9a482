"""Desk-scale knowledge-editing lab: a toy transformer, a closed-form editor,
specificity metrics, rank statistics and a reproducible sweep harness."""

from .edit import EditItem, EditSolution, PreservationQuery, multi_layer_edit, solve_delta
from .model import ModelConfig, ToyTransformer, init_model, load_checkpoint, save_checkpoint
from .vocab import Vocab, default_vocab, tokenize

__version__ = "0.1.0"

__all__ = [
    "EditItem",
    "EditSolution",
    "ModelConfig",
    "PreservationQuery",
    "ToyTransformer",
    "Vocab",
    "default_vocab",
    "init_model",
    "load_checkpoint",
    "multi_layer_edit",
    "save_checkpoint",
    "solve_delta",
    "tokenize",
]
