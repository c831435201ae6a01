"""Estimator-style front end for training and scoring in memory.

Wraps the two-stage trainer and the fused scorer behind the familiar
``fit`` / ``get_params`` surface so the detector can sit in sklearn
pipelines and grid searches. The file-based workflow (manifests, score
CSVs) lives in the CLI instead.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import scoring, trainer
from .data import MultiViewDataset
from .errors import ConfigError, DimensionError
from .trainer import TrainConfig

__all__ = ["MultiViewAnomalyDetector"]

_CONFIG_FIELDS = (
    "stage1_epochs",
    "stage2_epochs",
    "backbone_lr",
    "allocation_lr",
    "batch_size",
    "contrastive_loss_weight",
    "temperature",
    "alpha",
    "beta",
    "weight_decay",
    "seed",
    "faithful_infonce",
    "encoder_hidden",
    "latent_dim",
    "pca_dim",
    "estimator_hidden",
    "bank_size",
)


def _as_views(X) -> list:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ConfigError(
            "expected a list of per-view matrices, got a single 2-d array; "
            "wrap it in a list and add at least one more view"
        )
    if not isinstance(X, (list, tuple)):
        raise ConfigError(f"expected a list of per-view matrices, got {type(X)!r}")
    views = []
    for k, v in enumerate(X):
        arr = np.asarray(v, dtype=float)
        if arr.ndim != 2:
            raise DimensionError(f"view {k} must be 2-d, got shape {arr.shape}")
        views.append(arr)
    return views


class MultiViewAnomalyDetector(BaseEstimator):
    """Anomaly detector over multiple embedding views of the same samples.

    Each view gets its own autoencoder; training couples the views with a
    contrastive matching term and then learns per-sample view weights.
    ``anomaly_score`` is the fused score (higher = more anomalous);
    ``score_samples`` follows the sklearn sign convention instead. No
    threshold is chosen here, so there is no ``predict``.

    Parameters mirror the training config one to one; ``variant`` selects
    an ablated pipeline (``no_aa``, ``no_cc``, ``no_ae``) and defaults to
    the full model.
    """

    def __init__(
        self,
        stage1_epochs=100,
        stage2_epochs=50,
        backbone_lr=1e-3,
        allocation_lr=1e-3,
        batch_size=256,
        contrastive_loss_weight=1.0,
        temperature=0.5,
        alpha=1.0,
        beta=1.0,
        weight_decay=0.0,
        seed=0,
        faithful_infonce=True,
        encoder_hidden=(512, 256),
        latent_dim=128,
        pca_dim=128,
        estimator_hidden=64,
        bank_size=1024,
        variant="full",
    ):
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.backbone_lr = backbone_lr
        self.allocation_lr = allocation_lr
        self.batch_size = batch_size
        self.contrastive_loss_weight = contrastive_loss_weight
        self.temperature = temperature
        self.alpha = alpha
        self.beta = beta
        self.weight_decay = weight_decay
        self.seed = seed
        self.faithful_infonce = faithful_infonce
        self.encoder_hidden = encoder_hidden
        self.latent_dim = latent_dim
        self.pca_dim = pca_dim
        self.estimator_hidden = estimator_hidden
        self.bank_size = bank_size
        self.variant = variant

    # ------------------------------------------------------------------

    def _config(self) -> TrainConfig:
        values = {name: getattr(self, name) for name in _CONFIG_FIELDS}
        hidden = values["encoder_hidden"]
        if isinstance(hidden, list):
            values["encoder_hidden"] = tuple(hidden)
        return TrainConfig(**values)

    def fit(self, X, y=None):
        """Train on views assumed normal-only; ``y`` is accepted and ignored."""
        views = _as_views(X)
        ds = MultiViewDataset(views=views)
        self.model_ = trainer.fit(ds, self._config(), variant=self.variant)
        self.n_views_in_ = ds.n_views
        self.view_dims_ = ds.dims
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this MultiViewAnomalyDetector instance is not fitted yet"
            )

    def _dataset(self, X) -> MultiViewDataset:
        views = _as_views(X)
        if len(views) != self.n_views_in_:
            raise DimensionError(
                f"{len(views)} views passed, fitted with {self.n_views_in_}"
            )
        return MultiViewDataset(views=views)

    def score_breakdown(self, X) -> list:
        """Per-sample score records with per-view parts and weights."""
        self._require_fitted()
        return scoring.score(self.model_, self._dataset(X))

    def anomaly_score(self, X) -> np.ndarray:
        """Fused anomaly score per sample; larger means more anomalous."""
        return np.array([r.fused for r in self.score_breakdown(X)])

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def decision_function(self, X) -> np.ndarray:
        # no learned threshold: the decision value is the raw sklearn-signed score
        return self.score_samples(X)
