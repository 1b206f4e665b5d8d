"""Evaluation metrics: MAE/RMSE plus their nonzero-restricted variants.

The starred metrics (MAE*, RMSE*) restrict to samples whose ground truth is
nonzero. On zero-inflated data they expose the part of the error a constant
all-zero predictor cannot explain: predicting all zeros gives
MAE = (1 - zero_ratio) * mean|nonzero| but MAE* = mean|nonzero|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

__all__ = ["MetricsReport", "compute_metrics", "format_metrics", "metrics_csv_row"]


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    mae_star: float | None  # absent when no nonzero ground truth exists
    rmse_star: float | None
    n_samples: int
    n_nonzero: int
    zero_ratio: float


def compute_metrics(x_true: np.ndarray, x_hat: np.ndarray) -> MetricsReport:
    """Metrics over all samples; inputs are flattened and must match in shape.

    Values are expected on the denormalized scale with predictions already
    clamped at zero.
    """
    t = np.asarray(x_true, dtype=np.float64).ravel()
    h = np.asarray(x_hat, dtype=np.float64).ravel()
    if np.asarray(x_true).shape != np.asarray(x_hat).shape:
        raise ShapeError(
            f"shapes differ: truth {np.asarray(x_true).shape} vs prediction {np.asarray(x_hat).shape}"
        )
    if t.size == 0:
        raise ContractError("metrics need at least one sample")
    err = t - h
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    nonzero = t != 0
    n_nonzero = int(nonzero.sum())
    if n_nonzero > 0:
        err_nz = err[nonzero]
        mae_star = float(np.mean(np.abs(err_nz)))
        rmse_star = float(np.sqrt(np.mean(err_nz * err_nz)))
    else:
        mae_star = rmse_star = None
    return MetricsReport(
        mae=mae,
        rmse=rmse,
        mae_star=mae_star,
        rmse_star=rmse_star,
        n_samples=t.size,
        n_nonzero=n_nonzero,
        zero_ratio=float(np.mean(t == 0)),
    )


def format_metrics(report: MetricsReport, decimals: int = 4) -> str:
    """One `name=value` line per metric, values at fixed precision."""

    def fmt(v):
        return "absent" if v is None else f"{v:.{decimals}f}"

    lines = [
        f"mae={fmt(report.mae)}",
        f"rmse={fmt(report.rmse)}",
        f"mae_star={fmt(report.mae_star)}",
        f"rmse_star={fmt(report.rmse_star)}",
        f"zero_ratio={fmt(report.zero_ratio)}",
        f"n_samples={report.n_samples}",
        f"n_nonzero={report.n_nonzero}",
    ]
    return "\n".join(lines)


def metrics_csv_row(report: MetricsReport, decimals: int = 4, prefix: str = "") -> str:
    """A CSV row (optionally prefixed) for sweep aggregation."""

    def fmt(v):
        return "" if v is None else f"{v:.{decimals}f}"

    cells = [
        fmt(report.mae),
        fmt(report.rmse),
        fmt(report.mae_star),
        fmt(report.rmse_star),
        fmt(report.zero_ratio),
        str(report.n_samples),
        str(report.n_nonzero),
    ]
    return prefix + ",".join(cells)
