"""Pydantic models for configuration and reports."""

from pournet.models.config import (
    AtlasConfig,
    CascadeConfig,
    DatasetConfig,
    DegradeConfig,
    DemonsConfig,
    MetricOptions,
    OurNetConfig,
    PhantomSpec,
    RunConfig,
    TrainingConfig,
)
from pournet.models.report import AggregateReport, MetricReport, PriorReport

__all__ = [
    "AggregateReport",
    "AtlasConfig",
    "CascadeConfig",
    "DatasetConfig",
    "DegradeConfig",
    "DemonsConfig",
    "MetricOptions",
    "MetricReport",
    "OurNetConfig",
    "PhantomSpec",
    "PriorReport",
    "RunConfig",
    "TrainingConfig",
]
