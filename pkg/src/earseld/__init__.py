"""Echo-aware sound event localization and detection on synthetic FOA scenes."""
from .errors import EarError
from .features import FeatureStats, extract_features
from .metrics import MetricReport, compute_metrics
from .model import EARNet, ModelConfig
from .scenes import DatasetConfig
from .spatial import EnvironmentSpec, SourcePlacement, simulate_ir, simulate_noise

__version__ = "0.1.0"

__all__ = [
    "DatasetConfig",
    "EARNet",
    "EarError",
    "EnvironmentSpec",
    "FeatureStats",
    "MetricReport",
    "ModelConfig",
    "SourcePlacement",
    "compute_metrics",
    "extract_features",
    "simulate_ir",
    "simulate_noise",
]
