"""Hierarchical factor spaces and aggregated Bayesian inference for binary
decision scenarios."""

from .config import PipelineConfig
from .domain import (
    Condition,
    Factor,
    FactorCluster,
    FactorLabel,
    FactorSpace,
    Scenario,
    validate_factor_space,
)
from .gateway import CostLedger, Gateway, HashEmbedder, Tag, gateway_from_env
from .inference import (
    Decision,
    EvidenceSet,
    LatentBayesModel,
    LatentVariable,
    PosteriorReport,
    aggregate_bma,
    aggregate_lop,
    cbn_posterior,
    infer,
    nb_posterior,
)
from .mapping import MappingResult, map_condition

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "Condition",
    "Factor",
    "FactorCluster",
    "FactorLabel",
    "FactorSpace",
    "Scenario",
    "validate_factor_space",
    "CostLedger",
    "Gateway",
    "HashEmbedder",
    "Tag",
    "gateway_from_env",
    "Decision",
    "EvidenceSet",
    "LatentBayesModel",
    "LatentVariable",
    "PosteriorReport",
    "aggregate_bma",
    "aggregate_lop",
    "cbn_posterior",
    "infer",
    "nb_posterior",
    "MappingResult",
    "map_condition",
    "__version__",
]
