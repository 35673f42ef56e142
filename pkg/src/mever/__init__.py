"""Multi-modal evidence retrieval, claim verification, and explanation
generation, trainable end-to-end on desk-scale corpora."""

__version__ = "0.1.0"

from .datamodel import (
    ClaimRecord,
    Dataset,
    EvidenceRecord,
    ImageRecord,
    ValidationReport,
    align_images,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split_dataset,
    validate_dataset,
)
from .encoder import EncoderConfig, EncodedUnit, GraphEncoder, MultiModalGraph, build_graph
from .explainer import Seq2Seq, Seq2SeqConfig
from .retriever import RankedList, RetrievalIndex, build_index, retrieve
from .trainer import TrainConfig, freeze_and_retrieve, train_joint, train_retriever
from .verifier import VerdictDistribution, Verifier

__all__ = [
    "ClaimRecord", "Dataset", "EvidenceRecord", "ImageRecord", "ValidationReport",
    "align_images", "generate_synthetic", "load_corpus", "save_corpus",
    "split_dataset", "validate_dataset",
    "EncoderConfig", "EncodedUnit", "GraphEncoder", "MultiModalGraph", "build_graph",
    "Seq2Seq", "Seq2SeqConfig",
    "RankedList", "RetrievalIndex", "build_index", "retrieve",
    "TrainConfig", "freeze_and_retrieve", "train_joint", "train_retriever",
    "VerdictDistribution", "Verifier",
]
