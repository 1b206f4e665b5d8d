"""Synthetic zero-inflated spatiotemporal event generation.

The generator is a gated Poisson autoregression chosen to realize exactly
the dependency axes the forecaster claims to exploit: each cell's rate
combines a per-category base rate, the region's own previous slot, the mean
of graph neighbors' previous slots, and a cross-category coupling; a
Bernoulli exposure gate then zeroes cells to hit a target zero ratio.

The gate is not uniform: each (region, category) cell carries a propensity
(some cells are systematically exposure-prone, others not) and the gate
state is sticky over time (a Markov switch that keeps its previous value
with probability ``exposure_persistence``, else redraws). Both make the
exposure process inferable from the observed history, which is the
structure the exposure classifier exists to exploit; the stickiness leaves
the marginal open probability unchanged, so calibration is unaffected. The
global propensity scale is calibrated by bisection against the fully
simulated tensor, so the achieved zero ratio tracks the target even though
natural Poisson zeros depend on the dynamics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import timedelta

import numpy as np

from .errors import ConfigError, ShapeError
from .features import AnomalyTensor
from .graph import RegionGraph

logger = logging.getLogger(__name__)

__all__ = ["SynthConfig", "generate"]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the gated Poisson autoregression."""

    n_categories: int = 2
    n_slots: int = 400
    base_rate: tuple[float, ...] = (0.8, 0.5)  # per category
    self_excitation: float = 0.3  # weight on the region's own previous slot
    spatial_diffusion: float = 0.2  # weight on the neighbor mean, previous slot
    semantic_coupling: float = 0.1  # uniform off-diagonal cross-category weight
    target_zero_ratio: float = 0.727
    exposure_contrast: float = 0.7  # 0 = uniform gate; 1 = maximal cell spread
    exposure_persistence: float = 0.75  # gate stickiness over time, in [0, 1)
    seed: int = 0
    slot_duration: timedelta = timedelta(days=1)

    def __post_init__(self):
        if self.n_categories < 1 or self.n_slots < 1:
            raise ConfigError("n_categories and n_slots must be >= 1")
        if len(self.base_rate) != self.n_categories:
            raise ConfigError(
                f"{len(self.base_rate)} base rates for {self.n_categories} categories"
            )
        if min(self.base_rate) < 0:
            raise ConfigError("base rates must be nonnegative")
        if self.self_excitation < 0 or self.spatial_diffusion < 0 or self.semantic_coupling < 0:
            raise ConfigError("dependency coefficients must be nonnegative")
        if not 0.0 < self.target_zero_ratio < 1.0:
            raise ConfigError(f"target_zero_ratio must lie in (0, 1); got {self.target_zero_ratio}")
        if not 0.0 <= self.exposure_contrast <= 1.0:
            raise ConfigError(f"exposure_contrast must lie in [0, 1]; got {self.exposure_contrast}")
        if not 0.0 <= self.exposure_persistence < 1.0:
            raise ConfigError(
                f"exposure_persistence must lie in [0, 1); got {self.exposure_persistence}"
            )

    def coupling_matrix(self) -> np.ndarray:
        c = self.n_categories
        m = np.full((c, c), self.semantic_coupling, dtype=np.float64)
        np.fill_diagonal(m, 0.0)
        return m


def _simulate(cfg: SynthConfig, g: RegionGraph, scale: float) -> np.ndarray:
    """One full draw (N, T, C); ``scale`` multiplies every cell propensity."""
    n, t_total, c = g.n_regions, cfg.n_slots, cfg.n_categories
    rng = np.random.default_rng(cfg.seed)
    # per-cell propensity: a prone half and a reluctant half of the cells
    prone = rng.random(size=(n, c)) < 0.5
    propensity = np.where(prone, 1.0, 1.0 - cfg.exposure_contrast)
    u_fresh = rng.random(size=(n, t_total, c))
    u_stay = rng.random(size=(n, t_total, c))
    open_prob = np.clip(scale * propensity, 0.0, 1.0)

    coupling = cfg.coupling_matrix()
    base = np.asarray(cfg.base_rate, dtype=np.float64)
    degree = np.maximum(g.adjacency.sum(axis=1), 1.0)

    x = np.zeros((n, t_total, c), dtype=np.float64)
    prev = np.zeros((n, c), dtype=np.float64)
    gate = np.zeros((n, c), dtype=bool)
    for t in range(t_total):
        fresh = u_fresh[:, t, :] < open_prob
        if t == 0:
            gate = fresh
        else:
            gate = np.where(u_stay[:, t, :] < cfg.exposure_persistence, gate, fresh)
        rate = (
            base[None, :]
            + cfg.self_excitation * prev
            + cfg.spatial_diffusion * (g.adjacency @ prev) / degree[:, None]
            + prev @ coupling.T
        )
        counts = rng.poisson(rate).astype(np.float64)
        x[:, t, :] = counts * gate
        prev = x[:, t, :]
    return x


def generate(cfg: SynthConfig, g: RegionGraph) -> AnomalyTensor:
    """Draw a zero-inflated anomaly tensor calibrated to the target zero ratio.

    Deterministic given the seed. The propensity scale is bisected until the
    realized zero ratio matches the target; if even fully open gates leave
    more zeros than the target asks for (rates too low), a warning logs the
    achieved ratio and the open-gate draw is returned.
    """
    if g.n_regions < 1:
        raise ShapeError("graph must have at least one region")

    # scale >= 1/(1-contrast) saturates every propensity at 1 (fully open)
    s_max = 1.0 / max(1.0 - cfg.exposure_contrast, 1e-9)
    floor_draw = _simulate(cfg, g, scale=s_max)
    floor_ratio = float(np.mean(floor_draw == 0))
    if floor_ratio >= cfg.target_zero_ratio:
        if floor_ratio > cfg.target_zero_ratio + 0.01:
            logger.warning(
                "target zero ratio %.3f infeasible (natural zeros already %.3f); using open gate",
                cfg.target_zero_ratio,
                floor_ratio,
            )
        return AnomalyTensor(
            values=floor_draw, slot_duration=cfg.slot_duration,
            category_names=tuple(f"cat{i}" for i in range(cfg.n_categories)),
        )

    lo, hi = 0.0, s_max  # ratio(0) = 1, ratio(s_max) = floor_ratio < target
    draw = floor_draw
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        draw = _simulate(cfg, g, scale=mid)
        ratio = float(np.mean(draw == 0))
        if abs(ratio - cfg.target_zero_ratio) < 2e-3:
            break
        if ratio > cfg.target_zero_ratio:
            lo = mid  # too sparse: open the gates further
        else:
            hi = mid
    return AnomalyTensor(
        values=draw, slot_duration=cfg.slot_duration,
        category_names=tuple(f"cat{i}" for i in range(cfg.n_categories)),
    )
