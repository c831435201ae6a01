"""Per-sample view weighting: PCA alignment plus a shared MLP estimator.

Heterogeneous views are first projected into a common dimension with
per-view PCA models fitted on training data. A single estimator network
(d -> hidden -> 1, ReLU hidden, identity output; the same parameters for
every view) maps each aligned feature to a raw score; sigmoid then
row-normalization turns the K raw scores of a sample into weights that are
strictly positive and sum to 1.

While ``frozen`` (stage 1 of training) the estimator is bypassed entirely
and every weight row is exactly 1/K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionError, ModelIncomplete
from .linalg import PcaModel, pca_fit, pca_transform


@dataclass
class MlpEstimator:
    """Shared scalar-output scorer applied to each view's aligned feature."""

    W1: np.ndarray  # (d, hidden)
    b1: np.ndarray
    W2: np.ndarray  # (hidden, 1)
    b2: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    def named_params(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_estimator(input_dim: int, rng, hidden: int = 64) -> MlpEstimator:
    if input_dim < 1 or hidden < 1:
        raise DimensionError("estimator widths must be positive")
    lim1 = np.sqrt(6.0 / (input_dim + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 1))
    return MlpEstimator(
        W1=rng.uniform(-lim1, lim1, size=(input_dim, hidden)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-lim2, lim2, size=(hidden, 1)),
        b2=np.zeros(1),
    )


@dataclass
class AllocationState:
    """Alignment PCAs plus the weight estimator; ``frozen`` bypasses both."""

    n_views: int
    frozen: bool = True
    pca: list[PcaModel] | None = None
    estimator: MlpEstimator | None = None


def fit_alignment(views, d_target: int = 128) -> list[PcaModel]:
    """Fit one PCA per view onto a shared dimension.

    The shared dimension is d_target capped by the narrowest view and by
    N_train - 1, so small problems stay well-posed.
    """
    n = views[0].shape[0]
    d = min(d_target, min(v.shape[1] for v in views), n - 1)
    if d < 1:
        raise DimensionError(f"alignment dimension collapsed to {d}")
    return [pca_fit(v, d) for v in views]


def align(state: AllocationState, views) -> list[np.ndarray]:
    """Project each view through its fitted PCA; output matrices share d."""
    if state.pca is None:
        raise ModelIncomplete("allocation state has no fitted PCA aligners")
    if len(views) != state.n_views:
        raise DimensionError(f"{len(views)} views for a {state.n_views}-view state")
    return [pca_transform(m, v) for m, v in zip(state.pca, views)]


def raw_scores(est: MlpEstimator, aligned):
    """Estimator forward over all views; returns (N, K) raw scores + cache."""
    n = aligned[0].shape[0]
    for A in aligned:
        if A.shape != (n, est.input_dim):
            raise DimensionError(
                f"aligned view has shape {A.shape}, expected ({n}, {est.input_dim})"
            )
    caches = []
    out = np.empty((n, len(aligned)))
    for k, A in enumerate(aligned):
        pre = A @ est.W1 + est.b1
        h = np.maximum(pre, 0.0)
        out[:, k] = (h @ est.W2)[:, 0] + est.b2[0]
        caches.append((A, pre, h))
    return out, caches


def raw_scores_backward(est: MlpEstimator, caches, d_raw) -> dict:
    """Grads of sum_{i,k} d_raw[i,k] * raw[i,k] w.r.t. shared parameters."""
    grads = {name: np.zeros_like(p) for name, p in est.named_params().items()}
    for k, (A, pre, h) in enumerate(caches):
        dk = d_raw[:, k : k + 1]
        grads["W2"] += h.T @ dk
        grads["b2"] += dk.sum(axis=0)
        dh = (dk @ est.W2.T) * (pre > 0)
        grads["W1"] += A.T @ dh
        grads["b1"] += dh.sum(axis=0)
    return grads


def normalize_weights(raw) -> np.ndarray:
    """Row-wise sigmoid then normalize: w_k = sigmoid(raw_k) / sum_j sigmoid(raw_j)."""
    sig = expit(raw)
    return sig / sig.sum(axis=1, keepdims=True)


def normalize_weights_backward(raw, d_weights) -> np.ndarray:
    """Chain d(loss)/d(weights) back through sigmoid + normalization."""
    sig = expit(raw)
    T = sig.sum(axis=1, keepdims=True)
    W = sig / T
    inner = (d_weights * W).sum(axis=1, keepdims=True)
    return sig * (1.0 - sig) / T * (d_weights - inner)


def estimate_weights(state: AllocationState, views) -> np.ndarray:
    """Weight matrix (N, K) for the given views; exact 1/K rows while frozen."""
    if len(views) != state.n_views:
        raise DimensionError(f"{len(views)} views for a {state.n_views}-view state")
    n = views[0].shape[0]
    if state.frozen:
        return np.full((n, state.n_views), 1.0 / state.n_views)
    if state.estimator is None:
        raise ModelIncomplete("allocation state is unfrozen but has no estimator")
    aligned = align(state, views)
    raw, _ = raw_scores(state.estimator, aligned)
    return normalize_weights(raw)


def pair_weight(w_row, j: int, k: int) -> float:
    """Mean of the two view weights, the pairwise contrastive coefficient."""
    return 0.5 * (float(w_row[j]) + float(w_row[k]))


def top_view_histogram(W) -> np.ndarray:
    """How often each view carries the largest weight (ties to lowest index)."""
    W = np.asarray(W)
    return np.bincount(np.argmax(W, axis=1), minlength=W.shape[1])
