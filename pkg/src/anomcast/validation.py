"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .graph import RegionGraph

__all__ = ["check_index_array", "check_history_array", "check_graph_compat"]


def check_index_array(X, name: str = "X") -> np.ndarray:
    """Validate a raw (N, T, C) anomaly-index array: finite, nonnegative."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must have shape (n_regions, n_slots, n_categories); got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} must be finite")
    if np.any(arr < 0):
        raise ShapeError(f"{name} must be nonnegative")
    return arr


def check_history_array(X, t_window: int, name: str = "X") -> np.ndarray:
    """Validate a prediction input: (N, >= t_window, C) raw history."""
    arr = check_index_array(X, name=name)
    if arr.shape[1] < t_window:
        raise ShapeError(
            f"{name} needs at least t_window={t_window} slots of history; got {arr.shape[1]}"
        )
    return arr


def check_graph_compat(graph, n_regions: int) -> RegionGraph:
    if not isinstance(graph, RegionGraph):
        raise ShapeError("graph must be a RegionGraph")
    if graph.n_regions != n_regions:
        raise ShapeError(f"graph has {graph.n_regions} regions, data has {n_regions}")
    return graph
