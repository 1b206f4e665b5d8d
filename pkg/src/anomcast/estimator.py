"""scikit-learn style estimators wrapping the functional core.

:class:`AnomalyForecaster` is the fit/predict facade over the training loop;
:class:`IndexScaler` is a fit/transform wrapper over the per-category
normalization. Both inherit sklearn's ``BaseEstimator`` so ``get_params`` /
``set_params`` / ``clone`` work and they compose with the wider ecosystem.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ContractError
from .features import AnomalyTensor, apply_norm, denormalize, fit_norm_stats
from .heads import LossConfig
from .model import forward
from .training import TrainConfig, evaluate, make_windows, train
from .validation import check_graph_compat, check_history_array, check_index_array

__all__ = ["AnomalyForecaster", "IndexScaler"]


class IndexScaler(BaseEstimator, TransformerMixin):
    """Per-category z-score or min-max scaling of (N, T, C) index arrays."""

    def __init__(self, kind: str = "zscore"):
        self.kind = kind

    def fit(self, X, y=None):
        arr = check_index_array(X)
        self.stats_ = fit_norm_stats(arr, self.kind)
        return self

    def transform(self, X):
        self._check_fitted()
        return apply_norm(np.asarray(X, dtype=np.float64), self.stats_)

    def inverse_transform(self, X):
        self._check_fitted()
        return denormalize(np.asarray(X, dtype=np.float64), self.stats_)

    def _check_fitted(self):
        if not hasattr(self, "stats_"):
            raise ContractError("IndexScaler is not fitted; call fit first")


class AnomalyForecaster(BaseEstimator):
    """Next-slot anomaly-index forecaster over a region graph.

    ``fit(X, graph)`` takes the raw (n_regions, n_slots, n_categories) index
    array plus the region graph, trains with the configured windowing/split,
    and keeps the parameters of the best validation epoch. ``predict(X)``
    consumes the trailing ``t_window`` slots of a raw history and returns the
    denormalized, clamped-at-zero (n_regions, n_categories) forecast for the
    next slot.
    """

    def __init__(
        self,
        t_window: int = 30,
        hidden_size: int = 16,
        n_layers: int = 3,
        n_heads: int = 8,
        lr0: float = 0.001,
        decay: float = 0.96,
        epochs: int = 50,
        batch_size: int = 0,
        split_train: int = 7,
        split_test: int = 1,
        val_slots: int = 30,
        eta: tuple = (0.05, 0.2, 0.25, 0.5),
        lambda_c: float = 0.001,
        lambda_reg: float = 0.0001,
        tau: float = 0.5,
        norm_kind: str = "zscore",
        dsa_self_loop: bool = True,
        dsa_activation: str = "sigmoid",
        mask_mode: str = "predicted",
        ablation: str = "none",
        grad_clip: float = 0.0,
        seed: int = 0,
    ):
        self.t_window = t_window
        self.hidden_size = hidden_size
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.lr0 = lr0
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.split_train = split_train
        self.split_test = split_test
        self.val_slots = val_slots
        self.eta = eta
        self.lambda_c = lambda_c
        self.lambda_reg = lambda_reg
        self.tau = tau
        self.norm_kind = norm_kind
        self.dsa_self_loop = dsa_self_loop
        self.dsa_activation = dsa_activation
        self.mask_mode = mask_mode
        self.ablation = ablation
        self.grad_clip = grad_clip
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            t_window=self.t_window,
            d=self.hidden_size,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            lr0=self.lr0,
            decay=self.decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            split_ratio=(self.split_train, self.split_test),
            val_slots=self.val_slots,
            seed=self.seed,
            loss=LossConfig(
                eta=tuple(self.eta), lambda_c=self.lambda_c, lambda_reg=self.lambda_reg, tau=self.tau
            ),
            norm_kind=self.norm_kind,
            dsa_self_loop=self.dsa_self_loop,
            dsa_activation=self.dsa_activation,
            mask_mode=self.mask_mode,
            ablation=self.ablation,
            grad_clip=self.grad_clip,
        )

    def fit(self, X, graph):
        arr = check_index_array(X)
        graph = check_graph_compat(graph, arr.shape[0])
        cfg = self._train_config()
        dataset = make_windows(AnomalyTensor(values=arr), cfg)
        result = train(dataset, cfg, graph)
        self.graph_ = graph
        self.config_ = cfg
        self.model_ = result.model
        self.stats_ = result.stats
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_val_mae_ = result.best_val_mae
        self.n_categories_ = arr.shape[2]
        self.dataset_ = dataset
        return self

    def predict(self, X):
        """Forecast the slot after the supplied history; shape (N, C)."""
        self._check_fitted()
        xb = self._window_of(X)
        res = forward(self.model_, xb, self.graph_, tau=self.tau)
        pred = denormalize(res.x_hat.detach(), self.stats_)
        return np.maximum(pred, 0.0)

    def predict_exposure(self, X):
        """Exposure probabilities for the slot after the supplied history."""
        self._check_fitted()
        if self.ablation == "-MTP":
            raise ContractError("the -MTP variant has no exposure head")
        xb = self._window_of(X)
        res = forward(self.model_, xb, self.graph_, tau=self.tau)
        return res.p.detach().copy()

    def score_report(self, split: str = "test"):
        """MetricsReport on the fitted data's chosen split."""
        self._check_fitted()
        return evaluate(self.model_, self.dataset_, self.graph_, self.config_, split=split)

    def _window_of(self, X) -> np.ndarray:
        arr = check_history_array(X, self.t_window)
        if arr.shape[0] != self.graph_.n_regions or arr.shape[2] != self.n_categories_:
            raise ContractError(
                f"history shape {arr.shape} does not match fitted "
                f"(N={self.graph_.n_regions}, C={self.n_categories_})"
            )
        window = arr[:, -self.t_window :, :]
        return apply_norm(window, self.stats_)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ContractError("AnomalyForecaster is not fitted; call fit first")
