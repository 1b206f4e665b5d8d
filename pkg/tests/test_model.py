import numpy as np
import pytest

from anomcast.errors import ConfigError, ShapeError
from anomcast.graph import build_grid_graph, build_region_graph
from anomcast.heads import LossConfig
from anomcast.model import (
    batch_loss,
    forward,
    get_parameter,
    gradient_check_model,
    init_model,
    named_parameters,
    set_parameter,
)

PATH4 = build_region_graph(4, [(0, 1), (1, 2), (2, 3)])


def toy_model(ablation="none", seed=0, d=4, heads=2, layers=2, cats=2):
    return init_model(d=d, n_heads=heads, n_layers=layers, n_categories=cats,
                      rng=np.random.default_rng(seed), ablation=ablation)


def toy_batch(seed=0, b=None, n=4, t=5, c=2):
    rng = np.random.default_rng(seed)
    shape = (n, t, c) if b is None else (b, n, t, c)
    xb = rng.uniform(-1, 1, size=shape)
    y_raw = rng.poisson(0.7, size=shape[:-2] + (c,)).astype(float)
    y_norm = (y_raw - 0.4) / 0.9
    return xb, y_norm, y_raw


class TestForward:
    def test_shapes_unbatched(self):
        model = toy_model()
        xb, _, _ = toy_batch()
        res = forward(model, xb, PATH4)
        assert res.p.shape == (4, 2)
        assert res.z.shape == (4, 2)
        assert res.x_hat.shape == (4, 2)
        assert len(res.layer_outputs) == 3

    def test_shapes_batched(self):
        model = toy_model()
        xb, _, _ = toy_batch(b=3)
        res = forward(model, xb, PATH4)
        assert res.x_hat.shape == (3, 4, 2)

    def test_masking_contract(self):
        model = toy_model(seed=5)
        xb, _, _ = toy_batch(seed=5, b=8)
        res = forward(model, xb, PATH4, tau=0.5)
        x_hat = res.x_hat.detach()
        assert np.all(x_hat[res.z == 0] == 0.0)
        np.testing.assert_array_equal(res.z, (res.p.detach() >= 0.5).astype(float))

    def test_teacher_mask(self):
        model = toy_model(seed=6)
        xb, _, y_raw = toy_batch(seed=6)
        res = forward(model, xb, PATH4, mask_mode="teacher", teacher_positive=y_raw)
        np.testing.assert_array_equal(res.z, (y_raw > 0).astype(float))

    def test_teacher_mask_requires_targets(self):
        model = toy_model()
        xb, _, _ = toy_batch()
        with pytest.raises(ConfigError):
            forward(model, xb, PATH4, mask_mode="teacher")

    def test_mtp_has_no_probabilities(self):
        model = toy_model(ablation="-MTP")
        xb, _, _ = toy_batch()
        res = forward(model, xb, PATH4)
        assert res.p is None and res.z is None
        assert res.x_hat.shape == (4, 2)

    def test_region_count_checked(self):
        model = toy_model()
        xb, _, _ = toy_batch(n=5)
        with pytest.raises(ShapeError):
            forward(model, xb, PATH4)

    def test_category_count_checked(self):
        model = toy_model()
        xb, _, _ = toy_batch(c=3)
        with pytest.raises(ShapeError):
            forward(model, xb, PATH4)


class TestParameters:
    def test_named_parameters_complete(self):
        model = toy_model()
        names = [name for name, _ in named_parameters(model)]
        assert names[0] == "embed.vectors"
        assert names[-1] == "head.count_w"
        assert len(names) == 1 + 14 * 2 + 2

    def test_get_set_round_trip(self):
        model = toy_model()
        from anomcast.autodiff import Tensor

        original = get_parameter(model, "layer1.gat_w")
        replacement = Tensor(np.zeros_like(original.data), requires_grad=True)
        set_parameter(model, "layer1.gat_w", replacement)
        assert get_parameter(model, "layer1.gat_w") is replacement
        set_parameter(model, "layer1.gat_w", original)

    def test_init_is_seed_deterministic(self):
        a = toy_model(seed=3)
        b = toy_model(seed=3)
        for (_, pa), (_, pb) in zip(named_parameters(a), named_parameters(b)):
            np.testing.assert_array_equal(pa.data, pb.data)


class TestBatchLoss:
    def test_loss_is_finite_scalar(self):
        model = toy_model(seed=7)
        xb, y_norm, y_raw = toy_batch(seed=7, b=4)
        res = forward(model, xb, PATH4)
        loss = batch_loss(model, res, y_norm, y_raw, LossConfig())
        assert loss.shape == ()
        assert np.isfinite(loss.item())

    def test_mtp_loss_is_plain_sse_plus_reg(self):
        model = toy_model(ablation="-MTP", seed=8)
        xb, y_norm, y_raw = toy_batch(seed=8)
        res = forward(model, xb, PATH4)
        cfg = LossConfig(lambda_c=0.9, lambda_reg=0.0)
        loss = batch_loss(model, res, y_norm, y_raw, cfg)
        expected = np.sum((res.x_hat.detach() - y_norm) ** 2)
        assert loss.item() == pytest.approx(expected, rel=1e-12)


class TestGradientCheck:
    def test_all_groups_pass_with_default_tolerance(self):
        model = toy_model(seed=9)
        xb, y_norm, y_raw = toy_batch(seed=9)
        errors = gradient_check_model(
            model, PATH4, xb, y_norm, y_raw, LossConfig(lambda_c=0.01, lambda_reg=0.001)
        )
        assert set(errors) == {name for name, _ in named_parameters(model)}
        assert max(errors.values()) < 1e-4

    def test_mtp_variant_passes(self):
        model = toy_model(ablation="-MTP", seed=10, layers=1)
        xb, y_norm, y_raw = toy_batch(seed=10)
        errors = gradient_check_model(
            model, PATH4, xb, y_norm, y_raw, LossConfig(lambda_c=0.0, lambda_reg=0.001)
        )
        assert max(errors.values()) < 1e-4
