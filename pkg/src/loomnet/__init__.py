"""Workload replay over simulated or real point-to-point networks."""

from .workload import CollType, CommGroup, OperatorNode, OpKind, WorkloadGraph

__version__ = "0.1.0"

__all__ = ["CollType", "CommGroup", "OperatorNode", "OpKind", "WorkloadGraph", "__version__"]
