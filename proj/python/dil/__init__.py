# SPDX-License-Identifier: Apache-2.0
"""Delayed-interaction reader and BM25 open-domain QA."""

from dil._core import (
    ContractError,
    FormatError,
    Index,
    ModelConfig,
    NotFoundError,
    StaleCacheError,
    System,
    Vocab,
    Weights,
    em_f1,
    estimate,
    init_weights,
    load_weights,
    normalize_answer,
    precompute,
    read,
    read_baseline,
    synthetic_corpus,
    toy_model_config,
    train_toy,
)

__all__ = [
    "ContractError",
    "FormatError",
    "Index",
    "ModelConfig",
    "NotFoundError",
    "StaleCacheError",
    "System",
    "Vocab",
    "Weights",
    "em_f1",
    "estimate",
    "init_weights",
    "load_weights",
    "normalize_answer",
    "precompute",
    "read",
    "read_baseline",
    "synthetic_corpus",
    "toy_model_config",
    "train_toy",
]
