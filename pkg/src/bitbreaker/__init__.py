"""Bit-flip attack toolkit for small quantized networks.

The pipeline ranks layers by how much a handful of most-significant-bit
flips hurts the loss, picks the smallest top-k weight subset that crosses a
loss threshold, and shrinks it with a genetic search followed by random
pruning.
"""

from .flipset import FlipSet, load_flipset, save_flipset
from .genbfa import GaConfig, GaResult, optimize, prune, prune_run
from .oracle import GuardExceeded, OracleResult, exhaustive_min_flipset, verify_topk
from .qtensor import QuantFormat, QuantizedTensor, dequantize, flip_bit, quantize
from .sensitivity import SensitivityConfig, SensitivityProfile, rank_layers, sscore, top_k_count, top_k_indices
from .subsetsel import SubsetConfig, SubsetSelection, ThresholdNotReached, select_subset
from .toymodel import (
    Dataset,
    LayerKind,
    LayerSpec,
    ToyModel,
    accuracy,
    forward_loss,
    gradients,
    load_checkpoint,
    load_dataset,
    mask_weights,
    perplexity,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "FlipSet", "GaConfig", "GaResult", "GuardExceeded", "LayerKind", "LayerSpec", "OracleResult",
    "QuantFormat", "QuantizedTensor", "SensitivityConfig", "SensitivityProfile", "SubsetConfig",
    "SubsetSelection", "ThresholdNotReached", "ToyModel", "accuracy", "dequantize", "exhaustive_min_flipset",
    "flip_bit", "forward_loss", "gradients", "load_checkpoint", "load_dataset", "load_flipset", "mask_weights",
    "optimize", "perplexity", "prune", "prune_run", "quantize", "rank_layers", "save_checkpoint", "save_flipset",
    "select_subset", "sscore", "top_k_count", "top_k_indices", "verify_topk",
]
