"""Anomaly-index tensors, normalization, category embeddings, positional codes.

The raw signal is a nonnegative (N regions, T slots, C categories) array of
anomaly indices: event counts for crime-style data, summed risk values for
traffic-style data. Before entering the network it is normalized per
category (z-score or min-max, statistics fit on the training slots only) and
expanded into category-aware embeddings ``E0[r, t, c, :] = xbar[r, t, c] * e_c``
with a learnable vector ``e_c`` per category.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

__all__ = [
    "AnomalyTensor",
    "NormStats",
    "CategoryEmbeddingTable",
    "fit_norm_stats",
    "apply_norm",
    "normalize",
    "denormalize",
    "init_embedding_table",
    "category_embed",
    "positional_encode",
]

DEFAULT_T0 = datetime(2014, 1, 1, 0, 0, 0)


@dataclass(frozen=True)
class AnomalyTensor:
    """Nonnegative anomaly indices over (region, time slot, category)."""

    values: np.ndarray  # (N, T, C) float64, all >= 0
    slot_duration: timedelta = timedelta(days=1)
    category_names: tuple[str, ...] | None = None
    t0: datetime = field(default=DEFAULT_T0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ShapeError(f"anomaly values must be (N, T, C); got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1 or v.shape[2] < 1:
            raise ShapeError(f"anomaly values need N, T, C >= 1; got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("anomaly values must be finite")
        if np.any(v < 0):
            raise ShapeError("anomaly values must be nonnegative")
        if self.slot_duration <= timedelta(0):
            raise ValueError("slot_duration must be positive")
        names = self.category_names
        if names is not None and len(names) != v.shape[2]:
            raise ShapeError(f"{len(names)} category names for C={v.shape[2]}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if names is None:
            object.__setattr__(
                self, "category_names", tuple(f"cat{i}" for i in range(v.shape[2]))
            )
        else:
            object.__setattr__(self, "category_names", tuple(names))

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]

    @property
    def n_categories(self) -> int:
        return self.values.shape[2]

    @property
    def zero_ratio(self) -> float:
        return float(np.mean(self.values == 0))

    def with_values(self, values: np.ndarray, slot_duration=None) -> "AnomalyTensor":
        return replace(
            self,
            values=values,
            slot_duration=slot_duration if slot_duration is not None else self.slot_duration,
        )


@dataclass(frozen=True)
class NormStats:
    """Per-category normalization statistics fit on a training range.

    For ``zscore``, sigma is the population standard deviation with any
    degenerate (constant) category substituted by 1 so it stays positive.
    For ``minmax``, a degenerate range is likewise substituted at transform
    time. Both substitutions map a constant category to all zeros.
    """

    kind: str  # "zscore" | "minmax"
    mu: np.ndarray  # (C,)
    sigma: np.ndarray  # (C,), > 0
    vmin: np.ndarray  # (C,)
    vmax: np.ndarray  # (C,)

    def __post_init__(self):
        if self.kind not in ("zscore", "minmax"):
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive after degenerate substitution")
        if np.any(self.vmax < self.vmin):
            raise ValueError("max must be >= min")

    def _scale(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "zscore":
            return self.mu, self.sigma
        span = self.vmax - self.vmin
        return self.vmin, np.where(span == 0, 1.0, span)


def fit_norm_stats(values: np.ndarray, kind: str = "zscore") -> NormStats:
    """Fit per-category statistics across all regions and slots of ``values``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3:
        raise ShapeError(f"expected (N, T, C) values; got {v.shape}")
    mu = v.mean(axis=(0, 1))
    sigma = v.std(axis=(0, 1))  # population: divide by N*T
    sigma = np.where(sigma == 0, 1.0, sigma)
    return NormStats(kind=kind, mu=mu, sigma=sigma, vmin=v.min(axis=(0, 1)), vmax=v.max(axis=(0, 1)))


def apply_norm(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Transform raw indices with previously fit statistics (no refit)."""
    shift, scale = stats._scale()
    return (np.asarray(values, dtype=np.float64) - shift) / scale


def normalize(x: AnomalyTensor, kind: str = "zscore") -> tuple[np.ndarray, NormStats]:
    """Fit statistics on ``x`` and return (normalized values, stats)."""
    stats = fit_norm_stats(x.values, kind)
    return apply_norm(x.values, stats), stats


def denormalize(xbar: np.ndarray, stats: NormStats) -> np.ndarray:
    """Exact inverse of :func:`apply_norm`.

    No clamping happens here; the metric path clamps predictions at 0
    separately, since counts cannot be negative.
    """
    if not isinstance(stats, NormStats):
        raise ContractError("denormalize requires the NormStats produced by normalize")
    shift, scale = stats._scale()
    return np.asarray(xbar, dtype=np.float64) * scale + shift


@dataclass
class CategoryEmbeddingTable:
    """Learnable per-category embedding vectors, one row per category."""

    vectors: Tensor  # (C, d)

    @property
    def n_categories(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def init_embedding_table(n_categories: int, d: int, rng: np.random.Generator) -> CategoryEmbeddingTable:
    scale = 1.0 / np.sqrt(d)
    vecs = rng.uniform(-scale, scale, size=(n_categories, d))
    return CategoryEmbeddingTable(vectors=Tensor(vecs, requires_grad=True))


def category_embed(xbar: np.ndarray, table: CategoryEmbeddingTable) -> Tensor:
    """Category-aware embedding ``E0[..., c, :] = xbar[..., c] * e_c``.

    ``xbar`` is (N, T, C) or batched (B, N, T, C); the result appends the
    embedding width d as a trailing axis. Linear in ``xbar``.
    """
    xb = np.asarray(xbar, dtype=np.float64)
    if xb.ndim not in (3, 4):
        raise ShapeError(f"expected (N, T, C) or (B, N, T, C); got {xb.shape}")
    c, d = table.vectors.shape
    if xb.shape[-1] != c:
        raise ShapeError(f"category axis {xb.shape[-1]} does not match table C={c}")
    full = xb.shape + (d,)
    scal = ad.broadcast_to(Tensor(xb[..., None]), full)
    vecs = ad.broadcast_to(ad.reshape(table.vectors, (1,) * (xb.ndim - 1) + (c, d)), full)
    return ad.mul(scal, vecs)


def positional_encode(t_len: int, d: int) -> np.ndarray:
    """Sinusoidal position codes: PE[p, 2i] = sin(p/10000^(2i/d)), odd cols cos."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding width must be even; got {d}")
    if t_len < 1:
        raise ValueError(f"positional encoding length must be >= 1; got {t_len}")
    pos = np.arange(t_len, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((t_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe
