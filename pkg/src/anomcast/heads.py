"""Zero-inflated multi-task prediction head and its losses.

Sparse anomaly data is modeled as a mixture of two processes: an exposure
process (can an anomaly occur in this region/category at all?) handled by an
auxiliary per-category classifier, and a count process (how severe, given
exposure) handled by the main regression head. The classifier's output is
thresholded into a hard mask that zeroes the regression output; the mask is
a constant during backpropagation, so the exposure head learns only from its
cross-entropy term.

The regression loss is bucket-weighted: samples are grouped by their
ground-truth magnitude into {0, 1, 2, >=3} and each bucket scales its squared
residuals by eta_f, which is how the flood of exact zeros is kept from
dominating the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

__all__ = [
    "HeadParams",
    "LossConfig",
    "PredictionOutput",
    "init_head_params",
    "fuse_embeddings",
    "exposure_head",
    "threshold_mask",
    "count_head",
    "linear_head",
    "classification_loss",
    "regression_loss",
    "total_loss",
]

LOG_CLAMP = 1e-12


@dataclass
class HeadParams:
    """Per-category weight vectors; ``exposure_w`` is None for the -MTP variant."""

    exposure_w: Tensor | None  # (C, d)
    count_w: Tensor  # (C, d)

    def named(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        if self.exposure_w is not None:
            yield f"{prefix}exposure_w", self.exposure_w
        yield f"{prefix}count_w", self.count_w


def init_head_params(
    n_categories: int, d: int, rng: np.random.Generator, with_exposure: bool = True
) -> HeadParams:
    scale = 1.0 / np.sqrt(d)
    exposure = None
    if with_exposure:
        exposure = Tensor(rng.uniform(-scale, scale, size=(n_categories, d)), requires_grad=True)
    count = Tensor(rng.uniform(-scale, scale, size=(n_categories, d)), requires_grad=True)
    return HeadParams(exposure_w=exposure, count_w=count)


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters: bucket weights, task weights, exposure threshold."""

    eta: tuple[float, float, float, float] = (0.05, 0.2, 0.25, 0.5)
    lambda_c: float = 0.001
    lambda_reg: float = 0.0001
    tau: float = 0.5

    def __post_init__(self):
        if len(self.eta) != 4 or any(w < 0 for w in self.eta):
            raise ValueError(f"eta must be four nonnegative weights; got {self.eta}")
        if self.lambda_c < 0 or self.lambda_reg < 0:
            raise ValueError("lambda_c and lambda_reg must be nonnegative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1); got {self.tau}")


@dataclass
class PredictionOutput:
    """Inference-facing head outputs for one window (or a batch of windows)."""

    p: np.ndarray | None  # exposure probabilities in (0, 1); None under -MTP
    z: np.ndarray | None  # binary mask; None under -MTP
    x_hat: np.ndarray  # predicted indices on the normalized scale

    def __post_init__(self):
        if self.z is not None:
            if self.z.shape != self.x_hat.shape:
                raise ShapeError("mask and prediction shapes differ")
            if np.any(self.x_hat[self.z == 0] != 0.0):
                raise ShapeError("predictions must be exactly 0 where the mask is 0")


def fuse_embeddings(layer_outputs: Sequence[Tensor]) -> Tensor:
    """Average the per-layer features, then sum over the time axis.

    Input tensors are ([B,] N, T, C, d); the result is ([B,] N, C, d).
    """
    if not layer_outputs:
        raise ContractError("fuse_embeddings needs at least one layer output")
    shape = layer_outputs[0].shape
    for t in layer_outputs[1:]:
        if t.shape != shape:
            raise ShapeError(f"layer output shapes differ: {shape} vs {t.shape}")
    if len(shape) not in (4, 5):
        raise ShapeError(f"expected rank-4 or rank-5 layer outputs; got {shape}")
    acc = layer_outputs[0]
    for t in layer_outputs[1:]:
        acc = ad.add(acc, t)
    avg = ad.mul(acc, 1.0 / len(layer_outputs))
    return ad.reduce_sum(avg, axis=len(shape) - 3)


def _per_category_dot(e: Tensor, w: Tensor) -> Tensor:
    """(..., C, d) features against (C, d) weights -> (..., C) dot products."""
    c, d = w.shape
    if e.shape[-2:] != (c, d):
        raise ShapeError(f"features {e.shape} do not end in (C={c}, d={d})")
    wb = ad.broadcast_to(ad.reshape(w, (1,) * (e.ndim - 2) + (c, d)), e.shape)
    return ad.reduce_sum(ad.mul(e, wb), axis=e.ndim - 1)


def exposure_head(e: Tensor, hp: HeadParams) -> Tensor:
    """Exposure probabilities sigmoid(w_c . e[..., c, :]) in (0, 1)."""
    if hp.exposure_w is None:
        raise ContractError("this head has no exposure parameters (-MTP variant)")
    return ad.sigmoid(_per_category_dot(e, hp.exposure_w))


def threshold_mask(p: Tensor | np.ndarray, tau: float) -> np.ndarray:
    """Hard mask z = 1 iff p >= tau; carries no gradient."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1); got {tau}")
    probs = p.data if isinstance(p, Tensor) else np.asarray(p)
    return (probs >= tau).astype(np.float64)


def count_head(e: Tensor, z: np.ndarray, hp: HeadParams) -> Tensor:
    """Masked count predictions: (w_c . e[..., c, :]) * z, exactly 0 where z = 0."""
    raw = _per_category_dot(e, hp.count_w)
    if z.shape != raw.shape:
        raise ShapeError(f"mask shape {z.shape} does not match predictions {raw.shape}")
    return ad.mul(raw, Tensor(z))


def linear_head(e: Tensor, hp: HeadParams) -> Tensor:
    """Unmasked per-category linear regression (the -MTP replacement head)."""
    return _per_category_dot(e, hp.count_w)


def classification_loss(x_true: np.ndarray, p: Tensor) -> Tensor:
    """Binary cross-entropy of the exposure task, summed over all samples.

    The positive indicator is x_true > 0 on the raw (denormalized) scale.
    Log arguments are clamped at 1e-12 defensively.
    """
    truth = np.asarray(x_true, dtype=np.float64)
    if truth.shape != p.shape:
        raise ShapeError(f"ground truth {truth.shape} does not match probabilities {p.shape}")
    delta = (truth > 0).astype(np.float64)
    log_p = ad.log(ad.clip_min(p, LOG_CLAMP))
    log_1mp = ad.log(ad.clip_min(ad.sub(1.0, p), LOG_CLAMP))
    pos = ad.mul(log_p, Tensor(delta))
    neg = ad.mul(log_1mp, Tensor(1.0 - delta))
    return ad.mul(ad.reduce_sum(ad.add(pos, neg)), -1.0)


def bucket_of(values: np.ndarray) -> np.ndarray:
    """Magnitude bucket indices over {0, 1, 2, >=3}; fractions are floored."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64)), 0, 3).astype(np.intp)


def regression_loss(
    x_true: np.ndarray,
    x_hat: Tensor,
    eta: Sequence[float],
    bucket_values: np.ndarray | None = None,
) -> Tensor:
    """Bucket-weighted sum of squared residuals.

    Buckets come from ``bucket_values`` when given (the raw-scale truth during
    training, while residuals stay on the normalized scale) and from
    ``x_true`` otherwise.
    """
    truth = np.asarray(x_true, dtype=np.float64)
    if truth.shape != x_hat.shape:
        raise ShapeError(f"ground truth {truth.shape} does not match predictions {x_hat.shape}")
    eta_arr = np.asarray(eta, dtype=np.float64)
    if eta_arr.shape != (4,):
        raise ShapeError(f"eta must have exactly four entries; got shape {eta_arr.shape}")
    source = truth if bucket_values is None else np.asarray(bucket_values, dtype=np.float64)
    if source.shape != truth.shape:
        raise ShapeError("bucket_values shape must match x_true")
    weights = eta_arr[bucket_of(source)]
    resid = ad.sub(x_hat, Tensor(truth))
    return ad.reduce_sum(ad.mul(ad.square(resid), Tensor(weights)))


def total_loss(
    l_r: Tensor, l_c: Tensor, params: Iterable[Tensor], cfg: LossConfig
) -> Tensor:
    """L_r + lambda_c * L_c + lambda_reg * sum of squared parameter norms."""
    loss = ad.add(l_r, ad.mul(l_c, cfg.lambda_c))
    reg = None
    for p in params:
        term = ad.reduce_sum(ad.square(p))
        reg = term if reg is None else ad.add(reg, term)
    if reg is not None:
        loss = ad.add(loss, ad.mul(reg, cfg.lambda_reg))
    return loss
