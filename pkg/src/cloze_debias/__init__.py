"""Debiased Cloze-task training for sequential recommendation.

Weighted masked-item losses (plain, static and temporal inverse propensity,
relevance-weighted ideal), a numpy transformer encoder, semi-synthetic
worlds with tunable exposure bias, evaluation and feedback-loop tools.
"""

from .data import (
    InteractionRecord, MaskedBatch, SequenceDataset, Vocabulary, append_inference_mask,
    apply_cloze_mask, build_sequences, dataset_summary, ingest_tsv,
)
from .evaluation import EvalReport, loo_split, replace_with_most_relevant
from .propensity import PropensityTable, estimate_temporal_popularity, smooth_and_clip
from .synth import SyntheticWorld, WorldConfig, generate_world, sample_world_draw
from .trainer import ClozeRecommender, TrainConfig, evaluate_model, train

__version__ = "0.1.0"

__all__ = [
    "ClozeRecommender", "EvalReport", "InteractionRecord", "MaskedBatch", "PropensityTable",
    "SequenceDataset", "SyntheticWorld", "TrainConfig", "Vocabulary", "WorldConfig",
    "append_inference_mask", "apply_cloze_mask", "build_sequences", "dataset_summary",
    "estimate_temporal_popularity", "evaluate_model", "generate_world", "ingest_tsv",
    "loo_split", "replace_with_most_relevant", "sample_world_draw", "smooth_and_clip", "train",
]
