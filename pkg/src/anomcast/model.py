"""Full forecaster assembly: parameters, forward pass, gradient checking.

A model is the category embedding table, a stack of spatiotemporal-semantic
layers, and the multi-task head (or, for the -MTP variant, a plain linear
head). The forward pass consumes a normalized (B, N, T, C) history batch and
produces exposure probabilities, the hard mask, and masked count predictions
for slot T+1 of every window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .features import CategoryEmbeddingTable, category_embed, init_embedding_table, positional_encode
from .graph import RegionGraph
from .heads import (
    HeadParams,
    LossConfig,
    classification_loss,
    count_head,
    exposure_head,
    fuse_embeddings,
    init_head_params,
    linear_head,
    regression_loss,
    threshold_mask,
    total_loss,
)
from .layers import ABLATIONS, LayerTrace, StcLayerParams, init_layer_params, stc_stack

__all__ = [
    "ModelParams",
    "ForwardResult",
    "init_model",
    "named_parameters",
    "get_parameter",
    "set_parameter",
    "forward",
    "batch_loss",
    "gradient_check_model",
]


@dataclass
class ModelParams:
    """Every learnable tensor of one model instance, grouped by component."""

    embed: CategoryEmbeddingTable
    layers: list[StcLayerParams]
    head: HeadParams
    d: int
    n_heads: int
    n_categories: int
    ablation: str = "none"
    dsa_self_loop: bool = True
    dsa_activation: str = "sigmoid"

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def init_model(
    d: int,
    n_heads: int,
    n_layers: int,
    n_categories: int,
    rng: np.random.Generator,
    ablation: str = "none",
    dsa_self_loop: bool = True,
    dsa_activation: str = "sigmoid",
) -> ModelParams:
    """Initialize all parameters; draw order is fixed so seeds reproduce."""
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if n_layers < 1:
        raise ConfigError(f"n_layers must be >= 1; got {n_layers}")
    if d % n_heads != 0:
        raise ConfigError(f"hidden size d={d} must be divisible by n_heads={n_heads}")
    embed = init_embedding_table(n_categories, d, rng)
    layers = [init_layer_params(d, n_heads, rng) for _ in range(n_layers)]
    head = init_head_params(n_categories, d, rng, with_exposure=(ablation != "-MTP"))
    return ModelParams(
        embed=embed,
        layers=layers,
        head=head,
        d=d,
        n_heads=n_heads,
        n_categories=n_categories,
        ablation=ablation,
        dsa_self_loop=dsa_self_loop,
        dsa_activation=dsa_activation,
    )


def named_parameters(model: ModelParams) -> list[tuple[str, Tensor]]:
    params: list[tuple[str, Tensor]] = [("embed.vectors", model.embed.vectors)]
    for i, layer in enumerate(model.layers):
        params.extend(layer.named(prefix=f"layer{i}."))
    params.extend(model.head.named(prefix="head."))
    return params


def get_parameter(model: ModelParams, name: str) -> Tensor:
    for pname, tensor in named_parameters(model):
        if pname == name:
            return tensor
    raise KeyError(name)


def set_parameter(model: ModelParams, name: str, tensor: Tensor) -> None:
    holder, attr = _resolve(model, name)
    setattr(holder, attr, tensor)


def _resolve(model: ModelParams, name: str):
    prefix, _, attr = name.partition(".")
    if prefix == "embed":
        return model.embed, attr
    if prefix == "head":
        return model.head, attr
    if prefix.startswith("layer"):
        return model.layers[int(prefix[5:])], attr
    raise KeyError(name)


@dataclass
class ForwardResult:
    """Graph-attached outputs of one forward pass over a window batch."""

    p: Tensor | None  # ([B,] N, C) exposure probabilities; None under -MTP
    z: np.ndarray | None  # ([B,] N, C) constant mask; None under -MTP
    x_hat: Tensor  # ([B,] N, C) predictions, normalized scale
    layer_outputs: list[Tensor]
    traces: list[LayerTrace]

    def prediction_arrays(self) -> tuple[np.ndarray | None, np.ndarray | None, np.ndarray]:
        p = None if self.p is None else self.p.detach()
        return p, self.z, self.x_hat.detach()


def forward(
    model: ModelParams,
    xbar: np.ndarray,
    graph: RegionGraph,
    tau: float = 0.5,
    mask_mode: str = "predicted",
    teacher_positive: np.ndarray | None = None,
    fixed_mask: np.ndarray | None = None,
) -> ForwardResult:
    """Run the model on a normalized ([B,] N, T, C) history.

    ``mask_mode`` selects how the count head is gated: ``predicted``
    thresholds the exposure probabilities at ``tau``; ``teacher`` uses the
    caller-supplied ground-truth positives. ``fixed_mask`` overrides both
    (used by gradient checking, where the mask must not move with the
    parameters).
    """
    xb = np.asarray(xbar, dtype=np.float64)
    if xb.ndim not in (3, 4):
        raise ShapeError(f"expected ([B,] N, T, C) input; got shape {xb.shape}")
    if xb.shape[-3] != graph.n_regions:
        raise ShapeError(f"input regions {xb.shape[-3]} do not match graph N={graph.n_regions}")
    if xb.shape[-1] != model.n_categories:
        raise ShapeError(f"input categories {xb.shape[-1]} do not match model C={model.n_categories}")
    if mask_mode not in ("predicted", "teacher"):
        raise ConfigError(f"unknown mask_mode {mask_mode!r}")

    t_window = xb.shape[-2]
    e0 = category_embed(xb, model.embed)
    pe = positional_encode(t_window, model.d)
    outs, traces = stc_stack(
        e0,
        graph,
        pe,
        model.layers,
        ablation=model.ablation,
        self_loop=model.dsa_self_loop,
        activation=model.dsa_activation,
    )
    fused = fuse_embeddings(outs)  # ([B,] N, C, d)

    if model.ablation == "-MTP":
        x_hat = linear_head(fused, model.head)
        return ForwardResult(p=None, z=None, x_hat=x_hat, layer_outputs=outs, traces=traces)

    p = exposure_head(fused, model.head)
    if fixed_mask is not None:
        z = np.asarray(fixed_mask, dtype=np.float64)
    elif mask_mode == "teacher":
        if teacher_positive is None:
            raise ConfigError("mask_mode='teacher' requires teacher_positive")
        z = (np.asarray(teacher_positive) > 0).astype(np.float64)
    else:
        z = threshold_mask(p, tau)
    x_hat = count_head(fused, z, model.head)
    return ForwardResult(p=p, z=z, x_hat=x_hat, layer_outputs=outs, traces=traces)


def batch_loss(
    model: ModelParams,
    result: ForwardResult,
    y_norm: np.ndarray,
    y_raw: np.ndarray,
    loss_cfg: LossConfig,
) -> Tensor:
    """Total training loss for one window batch.

    Residuals are taken on the normalized scale; bucket weights and the
    exposure indicator come from the raw-scale ground truth. The -MTP
    variant collapses to unweighted squared error (plus L2).
    """
    params = [t for _, t in named_parameters(model)]
    if model.ablation == "-MTP":
        l_r = ad.reduce_sum(ad.square(ad.sub(result.x_hat, Tensor(y_norm))))
        return total_loss(l_r, Tensor(0.0), params, cfg=loss_cfg)
    l_c = classification_loss(y_raw, result.p)
    l_r = regression_loss(y_norm, result.x_hat, loss_cfg.eta, bucket_values=y_raw)
    return total_loss(l_r, l_c, params, cfg=loss_cfg)


def gradient_check_model(
    model: ModelParams,
    graph: RegionGraph,
    xbar: np.ndarray,
    y_norm: np.ndarray,
    y_raw: np.ndarray,
    loss_cfg: LossConfig,
    h: float = 1e-5,
) -> dict[str, float]:
    """Finite-difference check of the full loss per parameter group.

    The count-head mask is computed once from the unperturbed model and held
    fixed: it is a constant during backpropagation, so the differentiable
    object is the loss at that mask. Returns max relative error per group.
    """
    if model.ablation == "-MTP":
        frozen_mask = None
    else:
        base = forward(model, xbar, graph, tau=loss_cfg.tau)
        frozen_mask = base.z

    def loss_now() -> Tensor:
        res = forward(model, xbar, graph, tau=loss_cfg.tau, fixed_mask=frozen_mask)
        return batch_loss(model, res, y_norm, y_raw, loss_cfg)

    errors: dict[str, float] = {}
    for name, param in named_parameters(model):
        def f(probe: Tensor, _name=name, _orig=param) -> Tensor:
            set_parameter(model, _name, probe)
            try:
                return loss_now()
            finally:
                set_parameter(model, _name, _orig)

        errors[name] = ad.finite_diff_check(f, param, h=h)
    return errors
