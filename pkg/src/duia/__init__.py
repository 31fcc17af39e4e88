"""Dynamic user-interest augmentation for multi-task ranking, in numpy."""
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, EventLog, GeneratorConfig, generate, ingest_csv, temporal_split
from .ghca import GHCAClusterer, MemoryNetwork, SnapshotError
from .metrics import auc
from .model import DUIARanker, NumericError
from .snapshot import snapshot_load, snapshot_save

__all__ = [
    "ConfigError", "DataError", "DUIARanker", "EventLog", "ExperimentConfig", "GeneratorConfig", "GHCAClusterer",
    "MemoryNetwork", "NumericError", "SnapshotError", "auc", "generate", "ingest_csv", "load_config",
    "snapshot_load", "snapshot_save", "temporal_split",
]
