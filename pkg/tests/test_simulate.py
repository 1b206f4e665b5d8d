import logging

import numpy as np
import pytest

from anomcast.errors import ConfigError
from anomcast.graph import build_grid_graph, build_region_graph
from anomcast.simulate import SynthConfig, generate


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        g = build_grid_graph(3, 3)
        cfg = SynthConfig(n_slots=80, seed=5)
        a = generate(cfg, g)
        b = generate(cfg, g)
        np.testing.assert_array_equal(a.values, b.values)

    def test_different_seed_differs(self):
        g = build_grid_graph(3, 3)
        a = generate(SynthConfig(n_slots=80, seed=5), g)
        b = generate(SynthConfig(n_slots=80, seed=6), g)
        assert not np.array_equal(a.values, b.values)


class TestPoissonMean:
    def test_open_gate_pure_poisson_mean(self):
        # no dynamics, gate forced open by an infeasible (too low) target:
        # empirical mean within 3 standard errors of the base rate
        g = build_grid_graph(5, 5)
        lam = 1.0
        cfg = SynthConfig(
            n_categories=1,
            n_slots=500,
            base_rate=(lam,),
            self_excitation=0.0,
            spatial_diffusion=0.0,
            semantic_coupling=0.0,
            exposure_contrast=0.0,
            exposure_persistence=0.0,
            target_zero_ratio=0.05,
            seed=1,
        )
        x = generate(cfg, g)
        n_cells = x.values.size
        assert n_cells >= 10_000
        se = np.sqrt(lam / n_cells)
        assert abs(x.values.mean() - lam) < 3 * se


class TestZeroRatioCalibration:
    @pytest.mark.parametrize("target", [0.727, 0.887])
    def test_hits_target_within_tolerance(self, target):
        g = build_grid_graph(5, 5)
        cfg = SynthConfig(n_categories=2, n_slots=2000, base_rate=(1.4, 1.0),
                          target_zero_ratio=target, seed=2)
        x = generate(cfg, g)
        assert x.values.size >= 100_000
        assert abs(x.zero_ratio - target) < 0.01

    def test_infeasible_target_warns_with_achieved_ratio(self, caplog):
        g = build_grid_graph(3, 3)
        cfg = SynthConfig(
            n_categories=1,
            n_slots=300,
            base_rate=(0.05,),  # natural zeros ~ e^-0.05 = 0.95 >> target
            self_excitation=0.0,
            spatial_diffusion=0.0,
            semantic_coupling=0.0,
            target_zero_ratio=0.3,
            seed=3,
        )
        with caplog.at_level(logging.WARNING, logger="anomcast.simulate"):
            x = generate(cfg, g)
        assert any("infeasible" in rec.message for rec in caplog.records)
        assert x.zero_ratio > 0.8


class TestGraphLocality:
    def test_disconnected_components_are_uncorrelated(self):
        # two disjoint edges; with pure diffusion the lag-1 cross-correlation
        # between components must be statistically indistinguishable from 0
        g = build_region_graph(4, [(0, 1), (2, 3)])
        cfg = SynthConfig(
            n_categories=1,
            n_slots=4000,
            base_rate=(1.0,),
            self_excitation=0.0,
            spatial_diffusion=0.8,
            semantic_coupling=0.0,
            exposure_contrast=0.0,
            exposure_persistence=0.0,
            target_zero_ratio=0.4,
            seed=4,
        )
        x = generate(cfg, g).values[:, :, 0]

        def lag1_corr(i, j):
            a, b = x[i, 1:], x[j, :-1]
            a = a - a.mean()
            b = b - b.mean()
            return float(a @ b / np.sqrt((a @ a) * (b @ b)))

        n_eff = x.shape[1] - 1
        band = 3.0 / np.sqrt(n_eff)
        for i, j in [(0, 2), (0, 3), (1, 2), (1, 3)]:
            assert abs(lag1_corr(i, j)) < band, (i, j)
        assert lag1_corr(0, 1) > band
        assert lag1_corr(2, 3) > band


class TestExposureStructure:
    def test_persistence_preserves_marginal_zero_ratio(self):
        g = build_grid_graph(4, 4)
        base = dict(n_categories=2, n_slots=1500, base_rate=(1.4, 1.0),
                    target_zero_ratio=0.7)
        sticky = generate(SynthConfig(**base, exposure_persistence=0.9, seed=7), g)
        free = generate(SynthConfig(**base, exposure_persistence=0.0, seed=7), g)
        assert abs(sticky.zero_ratio - 0.7) < 0.01
        assert abs(free.zero_ratio - 0.7) < 0.01

    def test_contrast_spreads_cell_activity(self):
        g = build_grid_graph(4, 4)
        base = dict(n_categories=1, n_slots=2000, base_rate=(1.2,), target_zero_ratio=0.6)
        flat = generate(SynthConfig(**base, exposure_contrast=0.0, seed=8), g)
        spread = generate(SynthConfig(**base, exposure_contrast=0.9, seed=8), g)
        flat_rates = (flat.values > 0).mean(axis=1).ravel()
        spread_rates = (spread.values > 0).mean(axis=1).ravel()
        assert spread_rates.std() > 2 * flat_rates.std()


class TestValidation:
    def test_base_rate_length_checked(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_categories=3, base_rate=(1.0,))

    def test_target_ratio_range(self):
        with pytest.raises(ConfigError):
            SynthConfig(target_zero_ratio=1.5)

    def test_negative_coefficients_rejected(self):
        with pytest.raises(ConfigError):
            SynthConfig(spatial_diffusion=-0.1)
