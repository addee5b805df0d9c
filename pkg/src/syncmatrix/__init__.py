"""Audio-visual offset estimation from cross-modal similarity matrices.

A small numpy autodiff engine, two-stream encoders trained with matching
losses, offset estimators reading the audio x visual similarity matrix,
a seeded synthetic paired-stream generator and the evaluation protocol.
"""

from .encoders import EmbeddingModel, EncoderConfig, PairEncoder, oracle_linear_encoder
from .estimators import (
    DiagAvgSync,
    SlidingWindowSync,
    SyncClassifier,
    SyncClsNet,
    SyncE2E,
    diag_avg_offset,
    saliency,
    sliding_window_offset,
    synccls_predict,
)
from .evaluation import EvalReport, accuracy, rer, run_benchmark
from .similarity import FeatureStream, OffsetLabel, band_indices, build_similarity_matrix
from .synthdata import ClipSet, GenConfig, generate_clip, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "ClipSet",
    "DiagAvgSync",
    "EmbeddingModel",
    "EncoderConfig",
    "EvalReport",
    "FeatureStream",
    "GenConfig",
    "OffsetLabel",
    "PairEncoder",
    "SlidingWindowSync",
    "SyncClassifier",
    "SyncClsNet",
    "SyncE2E",
    "accuracy",
    "band_indices",
    "build_similarity_matrix",
    "diag_avg_offset",
    "generate_clip",
    "generate_dataset",
    "oracle_linear_encoder",
    "rer",
    "run_benchmark",
    "saliency",
    "sliding_window_offset",
    "synccls_predict",
]
