"""Windowed datasets, Adam optimization, and the deterministic training loop.

History windows of length T predict the following slot. Windows are split
chronologically by target slot into train and test by the configured ratio,
with the last ``val_slots`` training targets held out for validation.
Normalization statistics are fit only on slots strictly before the first
test target, so nothing downstream of the split boundary can leak into
training.

All randomness flows from one seeded generator per run (initialization draws
first, then the per-epoch shuffles), so identical (config, seed) runs yield
bit-identical parameter trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, TrainingDivergedError
from .features import AnomalyTensor, NormStats, apply_norm, denormalize, fit_norm_stats
from .graph import RegionGraph
from .heads import LossConfig
from .layers import ABLATIONS
from .metrics import MetricsReport, compute_metrics
from .model import ModelParams, batch_loss, forward, init_model, named_parameters
from .autodiff import Tensor, no_grad

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "WindowedDataset",
    "AdamState",
    "EpochRecord",
    "TrainResult",
    "make_windows",
    "adam_step",
    "lr_at",
    "build_model",
    "train",
    "evaluate",
    "predict_batch",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines one training run."""

    t_window: int = 30
    d: int = 16
    n_layers: int = 3
    n_heads: int = 8
    lr0: float = 0.001
    decay: float = 0.96
    epochs: int = 50
    batch_size: int = 0  # 0 = full training set per step
    split_ratio: tuple[int, int] = (7, 1)  # train : test
    val_slots: int = 30
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    norm_kind: str = "zscore"
    dsa_self_loop: bool = True
    dsa_activation: str = "sigmoid"
    mask_mode: str = "predicted"
    ablation: str = "none"
    grad_clip: float = 0.0  # 0 = off; otherwise max global grad norm

    def __post_init__(self):
        if self.t_window < 1:
            raise ConfigError(f"t_window must be >= 1; got {self.t_window}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1]; got {self.decay}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be >= 0; got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1; got {self.epochs}")
        if len(self.split_ratio) != 2 or min(self.split_ratio) < 1:
            raise ConfigError(f"split_ratio must be two positive integers; got {self.split_ratio}")
        if self.norm_kind not in ("zscore", "minmax"):
            raise ConfigError(f"norm_kind must be 'zscore' or 'minmax'; got {self.norm_kind!r}")
        if self.mask_mode not in ("predicted", "teacher"):
            raise ConfigError(f"mask_mode must be 'predicted' or 'teacher'; got {self.mask_mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}; got {self.ablation!r}")
        if self.val_slots < 0:
            raise ConfigError(f"val_slots must be >= 0; got {self.val_slots}")


@dataclass
class WindowedDataset:
    """Window views over one anomaly tensor, split chronologically by target."""

    x_raw: np.ndarray  # (N, T_total, C)
    x_norm: np.ndarray  # same shape, normalized with train-range stats
    stats: NormStats
    t_window: int
    train_targets: np.ndarray  # target slot indices (excluding validation)
    val_targets: np.ndarray
    test_targets: np.ndarray

    @property
    def n_windows(self) -> int:
        return len(self.train_targets) + len(self.val_targets) + len(self.test_targets)

    def targets_for(self, split: str) -> np.ndarray:
        try:
            return {
                "train": self.train_targets,
                "val": self.val_targets,
                "test": self.test_targets,
            }[split]
        except KeyError:
            raise ContractError(f"unknown split {split!r}") from None

    def inputs(self, targets: np.ndarray) -> np.ndarray:
        """Stacked normalized histories, shape (B, N, t_window, C)."""
        return np.stack([self.x_norm[:, t - self.t_window : t, :] for t in targets])

    def labels(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(normalized, raw) targets, each shape (B, N, C)."""
        norm = np.stack([self.x_norm[:, t, :] for t in targets])
        raw = np.stack([self.x_raw[:, t, :] for t in targets])
        return norm, raw


def make_windows(x: AnomalyTensor, cfg: TrainConfig) -> WindowedDataset:
    """Build windows and the chronological train/val/test split."""
    total = x.n_slots
    if total <= cfg.t_window:
        raise DataError(
            f"need at least t_window+1 = {cfg.t_window + 1} slots to form one window; got {total}"
        )
    targets = np.arange(cfg.t_window, total)
    n = len(targets)
    tr, te = cfg.split_ratio
    n_train = int(np.floor(n * tr / (tr + te)))
    train_all, test = targets[:n_train], targets[n_train:]
    n_val = min(cfg.val_slots, max(len(train_all) - 1, 0))
    if n_val > 0:
        train, val = train_all[:-n_val], train_all[-n_val:]
    else:
        train, val = train_all, train_all[:0]

    fit_end = cfg.t_window + n_train  # first test target; nothing beyond it is fit
    stats = fit_norm_stats(x.values[:, :fit_end, :], cfg.norm_kind)
    x_norm = apply_norm(x.values, stats)
    return WindowedDataset(
        x_raw=x.values,
        x_norm=x_norm,
        stats=stats,
        t_window=cfg.t_window,
        train_targets=train,
        val_targets=val,
        test_targets=test,
    )


# -- optimization -----------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[tuple[str, Tensor]]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params},
            v={name: np.zeros_like(t.data) for name, t in params},
        )


def adam_step(
    params: list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params:
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} mismatches parameter {name} {p.data.shape}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        new = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new.setflags(write=False)
        p.data = new


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Exponential schedule lr0 * decay**epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0; got {epoch}")
    return cfg.lr0 * cfg.decay**epoch


def build_model(cfg: TrainConfig, n_categories: int, rng: np.random.Generator) -> ModelParams:
    """Initialized parameters for the configured ablation variant."""
    return init_model(
        d=cfg.d,
        n_heads=cfg.n_heads,
        n_layers=cfg.n_layers,
        n_categories=n_categories,
        rng=rng,
        ablation=cfg.ablation,
        dsa_self_loop=cfg.dsa_self_loop,
        dsa_activation=cfg.dsa_activation,
    )


# -- training loop -----------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float  # mean loss per window
    val_mae: float
    val_rmse: float


@dataclass
class TrainResult:
    model: ModelParams
    log: list[EpochRecord]
    best_epoch: int
    best_val_mae: float
    stats: NormStats


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    if batch_size <= 0 or batch_size >= len(order):
        return [order]
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def predict_batch(
    model: ModelParams,
    dataset: WindowedDataset,
    targets: np.ndarray,
    graph: RegionGraph,
    cfg: TrainConfig,
) -> np.ndarray:
    """Denormalized, clamped-at-zero predictions for the given targets."""
    preds = []
    with no_grad():
        for chunk in _batches(targets, cfg.batch_size if cfg.batch_size > 0 else 64):
            res = forward(
                model,
                dataset.inputs(chunk),
                graph,
                tau=cfg.loss.tau,
                mask_mode="predicted",
            )
            preds.append(res.x_hat.detach())
    raw = denormalize(np.concatenate(preds, axis=0), dataset.stats)
    return np.maximum(raw, 0.0)


def evaluate(
    model: ModelParams,
    dataset: WindowedDataset,
    graph: RegionGraph,
    cfg: TrainConfig,
    split: str = "test",
) -> MetricsReport:
    """Metrics on the denormalized scale over one split's windows."""
    targets = dataset.targets_for(split)
    if len(targets) == 0:
        raise ContractError(f"split {split!r} has no windows")
    preds = predict_batch(model, dataset, targets, graph, cfg)
    _, raw = dataset.labels(targets)
    return compute_metrics(raw, preds)


def train(
    dataset: WindowedDataset,
    cfg: TrainConfig,
    graph: RegionGraph,
) -> TrainResult:
    """Deterministic training; returns the parameters at best validation MAE.

    Raises :class:`TrainingDivergedError` as soon as a batch loss goes
    non-finite, naming the epoch and step.
    """
    if len(dataset.train_targets) == 0:
        raise DataError("training split is empty; provide more slots or adjust the split")
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, dataset.x_raw.shape[2], rng)
    params = named_parameters(model)
    state = AdamState.for_params(params)

    log: list[EpochRecord] = []
    best_epoch, best_val = -1, np.inf
    best_snapshot: dict[str, np.ndarray] = {}
    has_val = len(dataset.val_targets) > 0

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(dataset.train_targets)
        total_loss_value = 0.0
        for step, batch in enumerate(_batches(order, cfg.batch_size)):
            xb = dataset.inputs(batch)
            y_norm, y_raw = dataset.labels(batch)
            result = forward(
                model,
                xb,
                graph,
                tau=cfg.loss.tau,
                mask_mode=cfg.mask_mode,
                teacher_positive=y_raw if cfg.mask_mode == "teacher" else None,
            )
            loss = batch_loss(model, result, y_norm, y_raw, cfg.loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, step)
            loss.backward()
            grads = {name: p.grad for name, p in params}
            if cfg.grad_clip > 0:
                _clip_grads(grads, cfg.grad_clip, epoch, step)
            adam_step(params, grads, state, lr)
            total_loss_value += float(loss.data)

        train_loss = total_loss_value / len(dataset.train_targets)
        if has_val:
            val_metrics = evaluate(model, dataset, graph, cfg, split="val")
            val_mae, val_rmse = val_metrics.mae, val_metrics.rmse
        else:
            val_mae, val_rmse = train_loss, train_loss
        log.append(EpochRecord(epoch=epoch, lr=lr, train_loss=train_loss, val_mae=val_mae, val_rmse=val_rmse))
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_snapshot = {name: np.array(p.data) for name, p in params}

    for name, p in params:
        arr = best_snapshot[name]
        arr.setflags(write=False)
        p.data = arr
    return TrainResult(
        model=model, log=log, best_epoch=best_epoch, best_val_mae=best_val, stats=dataset.stats
    )


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float, epoch: int, step: int) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
        logger.warning("gradient clipped at epoch %d step %d (norm %.4g)", epoch, step, total)
