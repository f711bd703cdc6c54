"""Weakly-supervised and unsupervised alignment of knowledge graphs.

Source entities and relations are mapped onto a target graph through
softmax alignment functions over projected embedding distances, trained
against a triplet discriminator with a mutual-information regularizer.
"""

__version__ = "0.1.0"

from .alignment import AlignmentParams, Tables, procrustes_pretrain
from .embedding import EmbedConfig, EmbeddingTable, ModelKind, train_embeddings
from .errors import (ConfigError, ConflictError, DataError, FormatError, KgaError, NumericError,
                     ParseError, ShapeError, VocabularyError)
from .evaluation import EvalReport, collapse_histogram, evaluate
from .kg import AlignmentSeeds, GroundTruthMap, KnowledgeGraph, load_triples, synthesize_aligned_pair
from .trainer import RewardKind, TrainConfig, run_training
