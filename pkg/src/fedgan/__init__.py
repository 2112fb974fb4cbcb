"""Federated GAN simulator: MULTI-FLGAN with FLGAN/AFLGAN baselines."""
from .aggregation import AggregatorKind, coordinate_median, fedavg, krum, select_best, trimmed_mean
from .config import ExperimentPlan, RunConfig, load_config
from .topology import FluId, SyncId, allocate

__version__ = "0.1.0"

__all__ = [
    "AggregatorKind", "ExperimentPlan", "FluId", "RunConfig", "SyncId", "allocate",
    "coordinate_median", "fedavg", "krum", "load_config", "select_best", "trimmed_mean",
]
