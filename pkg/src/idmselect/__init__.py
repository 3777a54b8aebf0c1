"""Penalized illness-death models for interval-censored semi-competing-risk cohorts.

Estimates three-transition illness-death models (healthy -> ill -> dead,
healthy -> dead) from cohort data in which the illness onset is interval
censored by the visit schedule and may remain undiagnosed because of death.
Provides elastic-net variable selection over transition-specific covariates,
BIC-driven penalty selection, post-selection maximum-likelihood refits,
illness-probability prediction, a scenario simulator, and a study harness
with comparator models.
"""

__version__ = "0.1.0"

from .baselines import BaselineSpec, ThetaBlock, baseline_cumulative, baseline_intensity
from .data_model import (
    ColumnSchema,
    CovariateMatrix,
    Dataset,
    LikelihoodCase,
    ObservationRecord,
    classify_case,
    load_dataset,
    save_dataset,
)
from .model import ModelSpec, ParameterSet

__all__ = [
    "BaselineSpec",
    "ThetaBlock",
    "baseline_cumulative",
    "baseline_intensity",
    "ColumnSchema",
    "CovariateMatrix",
    "Dataset",
    "LikelihoodCase",
    "ObservationRecord",
    "classify_case",
    "load_dataset",
    "save_dataset",
    "ModelSpec",
    "ParameterSet",
    "__version__",
]
