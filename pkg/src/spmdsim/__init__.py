"""Deterministic single-process simulator for eager-SPMD distributed tensors."""

from .mesh import DeviceMesh, create_mesh
from .placement import (
    InterleavedShard,
    Partial,
    Placement,
    Replicate,
    Shard,
    ShardSpec,
    ShardView,
)
from .dtensor import DTensor, DTensorMeta, distribute, redistribute, to_global
from .rng import RngState

__all__ = [
    "DeviceMesh",
    "create_mesh",
    "Placement",
    "Shard",
    "Replicate",
    "Partial",
    "InterleavedShard",
    "ShardSpec",
    "ShardView",
    "DTensor",
    "DTensorMeta",
    "distribute",
    "redistribute",
    "to_global",
    "RngState",
]
