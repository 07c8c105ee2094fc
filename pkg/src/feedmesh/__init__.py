"""feedmesh: a desk-scale data feed ingestion system with a simulated cluster."""
from .catalog import Catalog, IngestionPolicy
from .engine import Engine, EngineConfig
from .harness import ExperimentConfig, GeneratorSpec, run_experiment, summarize

__all__ = ["Catalog", "IngestionPolicy", "Engine", "EngineConfig", "ExperimentConfig",
           "GeneratorSpec", "run_experiment", "summarize"]
__version__ = "0.1.0"
