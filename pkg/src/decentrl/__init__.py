"""Decentralized attention networks for knowledge-graph embedding."""

from .autodiff import (DegenerateNeighborhoodError, DimensionError, SegmentIndex, Tape,
                       TapeError, Tensor)
from .distiller import DensityParams, auto_distill_loss, info_nce_loss, mi_lower_bound_estimate
from .encoder import EncoderParams, LayerOutputs, encode, final_output, forward
from .evaluation import RankingReport, per_layer_eval, rank_alignment, rank_prediction
from .kg import (AlignmentPairs, KnowledgeGraph, NeighborIndex, OpenSplit, build_neighbor_index,
                 generate_synthetic_kg, load_triples, make_aligned_copy, merge_graphs,
                 split_open_world)
from .tasks import AlignConfig, PredictConfig, train_alignment, train_prediction

__version__ = "0.1.0"

__all__ = [
    "AlignConfig", "AlignmentPairs", "DegenerateNeighborhoodError", "DensityParams",
    "DimensionError", "EncoderParams", "KnowledgeGraph", "LayerOutputs", "NeighborIndex",
    "OpenSplit", "PredictConfig", "RankingReport", "SegmentIndex", "Tape", "TapeError",
    "Tensor", "auto_distill_loss", "build_neighbor_index", "encode", "final_output", "forward",
    "generate_synthetic_kg", "info_nce_loss", "load_triples", "make_aligned_copy",
    "merge_graphs", "mi_lower_bound_estimate", "per_layer_eval", "rank_alignment",
    "rank_prediction", "split_open_world", "train_alignment", "train_prediction",
]
