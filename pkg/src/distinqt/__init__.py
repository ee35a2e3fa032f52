"""Distributed QoS prediction with split encoders and per-NET weight averaging."""
from .config import RunConfig, load_config, parse_config
from .evaluation import MetricsReport, compute_mae, persistence_baseline
from .model import ModelConfig, preset
from .protocol import CentralizedTrainer, DistributedTrainer, run_training
from .topology import Topology, tod_topology

__version__ = "0.1.0"

__all__ = [
    "CentralizedTrainer", "DistributedTrainer", "MetricsReport", "ModelConfig", "RunConfig", "Topology",
    "compute_mae", "load_config", "parse_config", "persistence_baseline", "preset", "run_training",
    "tod_topology",
]
