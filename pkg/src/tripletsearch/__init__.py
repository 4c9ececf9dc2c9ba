"""Cosine-similarity embeddings trained with a batch-hard triplet loss, plus
brute-force retrieval evaluation and synthetic benchmark data."""

from .dataset import Dataset, FeatureRecord, SynthConfig, generate_synthetic, load_dataset, preset, write_dataset
from .embedding import EmbeddingModel, cosine_similarity, load_checkpoint, save_checkpoint
from .evaluation import EvalProtocol, EvalReport, build_index, evaluate, retrieve_topk
from .sampling import Minibatch, SamplerConfig, batch_hard_select
from .train import OptimizerConfig, TrainConfig, train

__all__ = [
    "Dataset", "FeatureRecord", "SynthConfig", "generate_synthetic", "load_dataset", "preset", "write_dataset",
    "EmbeddingModel", "cosine_similarity", "load_checkpoint", "save_checkpoint",
    "EvalProtocol", "EvalReport", "build_index", "evaluate", "retrieve_topk",
    "Minibatch", "SamplerConfig", "batch_hard_select",
    "OptimizerConfig", "TrainConfig", "train",
]
