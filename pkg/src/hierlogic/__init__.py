"""Differentiable rule learning over relational knowledge bases."""

__version__ = "0.1.0"

from .errors import HierLogicError
from .kb import (AdjacencyStore, KnowledgeBase, QueryBatch, SplitDataset, build_matrices,
                 gen_composition_kb, gen_even_successor, load_split_dataset, toy3,
                 write_split_dataset)
from .rulespace import AttentionBundle, RuleSpaceConfig, harden, score_queries
from .rulegen import ModelParams, generate
from .trainer import TrainConfig, TrainReport, TrainResult, checkpoint_load, checkpoint_save, train
from .extractor import (Rule, canonicalize, encode, evaluate_hard, extract, grounding_oracle,
                        parse_rule, render_operator_form, render_variable_form)
from .evalmetrics import filtered_rank, hits_at_k, mrr

__all__ = [
    "AdjacencyStore", "AttentionBundle", "HierLogicError", "KnowledgeBase", "ModelParams",
    "QueryBatch", "Rule", "RuleSpaceConfig", "SplitDataset", "TrainConfig", "TrainReport",
    "TrainResult", "build_matrices", "canonicalize", "checkpoint_load", "checkpoint_save",
    "encode", "evaluate_hard", "extract", "filtered_rank", "gen_composition_kb",
    "gen_even_successor", "generate", "grounding_oracle", "harden", "hits_at_k",
    "load_split_dataset", "mrr", "parse_rule", "render_operator_form", "render_variable_form",
    "score_queries", "toy3", "train", "write_split_dataset",
]
