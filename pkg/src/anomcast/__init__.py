"""Zero-inflated spatiotemporal forecasting of urban anomaly counts.

The package couples a region-graph attention network (semantic attention
across anomaly categories, a gated recurrent scan over time, and dynamic
spatiotemporal attention over graph neighborhoods) with a zero-inflation
aware multi-task head, on top of a small float64 reverse-mode autodiff
engine built for verifiability at desk scale.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, finite_diff_check
from .config import RunConfig, parse_config
from .errors import (
    AnomcastError,
    ConfigError,
    ContractError,
    DataError,
    DomainError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
)
from .estimator import AnomalyForecaster, IndexScaler
from .features import AnomalyTensor, NormStats, positional_encode
from .graph import RegionGraph, build_grid_graph, build_region_graph, load_graph_spec
from .heads import LossConfig
from .metrics import MetricsReport, compute_metrics
from .simulate import SynthConfig, generate
from .training import TrainConfig, make_windows, train

__all__ = [
    "__version__",
    "Tensor",
    "finite_diff_check",
    "RunConfig",
    "parse_config",
    "AnomcastError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DomainError",
    "NumericError",
    "ShapeError",
    "TrainingDivergedError",
    "AnomalyForecaster",
    "IndexScaler",
    "AnomalyTensor",
    "NormStats",
    "positional_encode",
    "RegionGraph",
    "build_grid_graph",
    "build_region_graph",
    "load_graph_spec",
    "LossConfig",
    "MetricsReport",
    "compute_metrics",
    "SynthConfig",
    "generate",
    "TrainConfig",
    "make_windows",
    "train",
]
