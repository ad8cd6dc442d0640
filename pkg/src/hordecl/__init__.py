"""Exemplar-free class-incremental learning with repetition using an ensemble
of frozen feature extractors and class prototypes."""

from .datastream import DatasetSpec, Scenario, gen_cil, gen_efcir, gen_synthetic_dataset
from .harness import RunRecord, TrainProtocol, compute_metrics, run_scenario
from .horde import HordeConfig, HordeMethod
from .baselines import BaselineConfig, BaselineMethod, FeTrILMethod, make_method

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "Scenario", "gen_cil", "gen_efcir", "gen_synthetic_dataset",
    "RunRecord", "TrainProtocol", "compute_metrics", "run_scenario",
    "HordeConfig", "HordeMethod", "BaselineConfig", "BaselineMethod", "FeTrILMethod",
    "make_method",
]
