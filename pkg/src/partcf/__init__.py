"""Patch-phrase part losses, counterfactual region removal and a toy grounded world."""
from .diffmath import NumericError, ParameterError, ShapeError
from .ppim import EmbeddingBatch, PartLossConfig, combined_loss, part_loss, part_objective
from .cfeval import MaskSpec, SimilarityMatrix, retrieval_metrics, run_counterfactual
from .toyworld import ToyEncoderParams, gen_dataset, train

__all__ = [
    "NumericError", "ParameterError", "ShapeError",
    "EmbeddingBatch", "PartLossConfig", "combined_loss", "part_loss", "part_objective",
    "MaskSpec", "SimilarityMatrix", "retrieval_metrics", "run_counterfactual",
    "ToyEncoderParams", "gen_dataset", "train",
]
__version__ = "0.1.0"
