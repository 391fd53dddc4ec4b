"""Cycle-level multi-core NPU simulator.

Tile-level lowering of DNN graphs onto weight-stationary systolic-array
cores with deterministic compute latency, plus cycle-accurate shared
DRAM and NoC contention modeling for multi-tenant inference studies.
"""

from .config import SimConfig, load_config, load_preset
from .engine import Simulator, run_simulation
from .graph import ModelGraph, parse_graph, serialize_graph, validate_graph
from .models import build_synthetic_model
from .report import build_report, emit_report
from .scheduler import InferenceRequest
from .workload import load_workload

__all__ = [
    "SimConfig",
    "load_config",
    "load_preset",
    "Simulator",
    "run_simulation",
    "ModelGraph",
    "parse_graph",
    "serialize_graph",
    "validate_graph",
    "build_synthetic_model",
    "build_report",
    "emit_report",
    "InferenceRequest",
    "load_workload",
]

__version__ = "0.1.0"
