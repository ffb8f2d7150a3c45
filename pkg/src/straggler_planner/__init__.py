"""Straggler-aware planning of DP x TP x PP training and a 1F1B simulator."""
from .domain import (FAILED, ClusterState, ConfigError, GpuId, Node, ParallelizationPlan,
                     Pipeline, ProfiledCoefficients, Stage, TaskSpec, TpGroup)

__all__ = [
    "FAILED", "ClusterState", "ConfigError", "GpuId", "Node", "ParallelizationPlan",
    "Pipeline", "ProfiledCoefficients", "Stage", "TaskSpec", "TpGroup",
]
__version__ = "0.1.0"
