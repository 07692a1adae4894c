"""3-D tensor parallelism on a simulated p x p x p processor cube."""

from .collectives import CostCounters, Endpoint, Transport, run_spmd
from .costs import CostPrediction, predict_costs, predict_layer_costs
from .errors import Cube3DError
from .layers import TransformerConfig
from .sharding import DirectionTriple, ShardedMatrix, collect, partition
from .topology import CubeTopology, build_cube

__all__ = [
    "CostCounters",
    "CostPrediction",
    "Cube3DError",
    "CubeTopology",
    "DirectionTriple",
    "Endpoint",
    "ShardedMatrix",
    "TransformerConfig",
    "Transport",
    "build_cube",
    "collect",
    "partition",
    "predict_costs",
    "predict_layer_costs",
    "run_spmd",
]
