"""Set-based alignment of frozen-encoder embeddings across two modalities.

Trainable projection heads map each modality into a shared space and are
fit with facility-location mutual-information losses (FLQMIA, FLVMIA) or
the InfoNCE / SigLIP pairwise baselines.
"""

from .aligner import AlignHead, read_heads, write_heads
from .data import Dataset, SynthConfig, generate, load_dataset, read_embedding_file, write_embedding_file
from .evaluation import eval_modality_gap, eval_prototype_classification, eval_retrieval
from .losses import LOSSES, grad_check, loss_flqmia, loss_flvmia, loss_infonce, loss_siglip
from .sets import EmbeddingBlock, EntityBatch, Modality, build_entity_batch
from .submodular import check_submodular, flqmi, flvmi, quadratic_smi
from .train import MetricsRecord, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AlignHead", "Dataset", "EmbeddingBlock", "EntityBatch", "LOSSES", "MetricsRecord", "Modality",
    "SynthConfig", "TrainConfig", "TrainResult", "build_entity_batch", "check_submodular",
    "eval_modality_gap", "eval_prototype_classification", "eval_retrieval", "flqmi", "flvmi",
    "generate", "grad_check", "load_dataset", "loss_flqmia", "loss_flvmia", "loss_infonce",
    "loss_siglip", "quadratic_smi", "read_embedding_file", "read_heads", "train", "write_embedding_file",
    "write_heads",
]
