"""Cross-view contrastive matching on shared-dimension latents.

For an anchor latent z_i in view j and target view k, the matching
probability compares the aligned pair against two negative pools drawn from
the same batch (or reference bank): other rows of the target view and other
rows of the anchor view. All similarities are cosines divided by a
temperature.

Two denominator conventions are supported. The faithful form leaves the
positive pair out of the denominator, so the "probability" can exceed 1 and
the loss can go negative. ``include_positive=True`` switches to the standard
form whose output always lies in (0, 1).

Everything runs in the log domain; ``counters`` tracks how often each entry
point runs so ablation tests can prove a disabled path was never touched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, ConfigError, DimensionError, EmptyBank
from .linalg import logsumexp, normalize_rows


class _Counters:
    """Call counters for proving code paths stayed cold."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.match_prob_calls = 0
        self.batch_loss_calls = 0
        self.scored_rows = 0


counters = _Counters()


def _check_latents(latents):
    if len(latents) < 2:
        raise DimensionError(f"need K >= 2 views, got {len(latents)}")
    b, d = latents[0].shape
    for k, Z in enumerate(latents):
        if Z.shape != (b, d):
            raise DimensionError(
                f"view {k} latents have shape {Z.shape}, expected {(b, d)}"
            )
    if b < 2:
        raise BatchTooSmall(f"contrastive negatives need a batch >= 2, got {b}")


def _check_tau(tau):
    if not (tau > 0):
        raise ConfigError(f"temperature must be positive, got {tau}")


def match_prob(anchor, target, index: int, tau: float, include_positive: bool = False) -> float:
    """Probability that row ``index`` of the anchor view matches the same row
    of the target view within this batch."""
    _check_latents([anchor, target])
    _check_tau(tau)
    counters.match_prob_calls += 1
    U = normalize_rows(anchor)
    W = normalize_rows(target)
    u = U[index]
    log_num = (u @ W[index]) / tau
    others = np.arange(U.shape[0]) != index
    terms = np.concatenate([(W[others] @ u) / tau, (U[others] @ u) / tau])
    if include_positive:
        terms = np.append(terms, log_num)
    return float(np.exp(log_num - logsumexp(terms)))


def _direction_losses(U, W, tau, include_positive):
    """Per-sample losses for one ordered direction plus the softmax-style
    responsibility matrices needed by the backward pass.

    Returns (L, P_cross, P_intra): L[i] = -log p_i, P_cross[i, m] the
    denominator share of target row m, P_intra[i, n] the share of anchor
    row n. Masked entries are exactly zero.
    """
    b = U.shape[0]
    logits = np.empty((b, 2 * b))
    logits_cross = logits[:, :b]
    logits_intra = logits[:, b:]
    np.matmul(U, W.T, out=logits_cross)
    np.matmul(U, U.T, out=logits_intra)
    logits /= tau
    log_num = logits_cross.diagonal().copy()
    np.fill_diagonal(logits_intra, -np.inf)
    if not include_positive:
        np.fill_diagonal(logits_cross, -np.inf)
    # one exp pass yields both the losses and the responsibility matrices
    m = logits.max(axis=1, keepdims=True)
    logits -= m
    np.exp(logits, out=logits)
    denom = logits.sum(axis=1, keepdims=True)
    logD = (m + np.log(denom))[:, 0]
    L = logD - log_num
    logits /= denom
    return L, logits_cross, logits_intra


def ordered_pairs(n_views: int):
    return [(j, k) for j in range(n_views) for k in range(n_views) if j != k]


def batch_losses(latents, tau: float, include_positive: bool = False) -> dict:
    """Per-sample loss -log p for every ordered view direction (j, k)."""
    _check_latents(latents)
    _check_tau(tau)
    counters.batch_loss_calls += 1
    units = [normalize_rows(Z) for Z in latents]
    out = {}
    for j, k in ordered_pairs(len(latents)):
        L, _, _ = _direction_losses(units[j], units[k], tau, include_positive)
        out[(j, k)] = L
    return out


def batch_losses_and_grads(
    latents, coeffs: dict, tau: float, include_positive: bool = False
):
    """Losses plus d(sum of weighted losses)/d(latents).

    ``coeffs[(j, k)]`` holds one nonnegative weight per sample for that
    ordered direction; the differentiated scalar is
    sum_{(j,k)} sum_i coeffs[(j,k)][i] * L_i^{(j,k)}. Gradients are with
    respect to the raw (unnormalized) latents.
    """
    _check_latents(latents)
    _check_tau(tau)
    counters.batch_loss_calls += 1
    K = len(latents)
    units = [normalize_rows(Z) for Z in latents]
    d_units = [np.zeros_like(U) for U in units]
    losses = {}
    if 1.0 / tau <= 700.0:
        # cosine logits are bounded by 1/tau, so exp cannot overflow and no
        # max shift is needed; each exp matrix serves both directions of its
        # pair and each intra matrix serves every direction anchored there
        E_intra, intra_rows = [], []
        for U in units:
            E = U @ U.T
            E /= tau
            np.exp(E, out=E)
            np.fill_diagonal(E, 0.0)
            E_intra.append(E)
            intra_rows.append(E.sum(axis=1))
        # E_intra[j] @ units[j] does not depend on the partner view, so it
        # is shared by every direction anchored at j
        intra_prod = [E @ U for E, U in zip(E_intra, units)]
        E_cross, log_num = {}, {}
        for j in range(K):
            for k in range(j + 1, K):
                S = units[j] @ units[k].T
                S /= tau
                log_num[(j, k)] = S.diagonal().copy()
                np.exp(S, out=S)
                if not include_positive:
                    np.fill_diagonal(S, 0.0)
                E_cross[(j, k)] = S
        for j, k in ordered_pairs(K):
            Ecr = E_cross[(j, k)] if j < k else E_cross[(k, j)].T
            num = log_num[(min(j, k), max(j, k))]
            D = Ecr.sum(axis=1) + intra_rows[j]
            losses[(j, k)] = np.log(D) - num
            c = np.asarray(coeffs[(j, k)], dtype=np.float64)
            c_tau = c / tau
            scale = (c_tau / D)[:, None]
            # the scaled softmax matrices are never materialized: per-anchor
            # row scaling commutes through each product, and the numerator's
            # -1 weight on the positive cosine becomes the c_tau corrections
            su = scale * units[j]
            acc = Ecr @ units[k]
            acc *= scale
            acc -= c_tau[:, None] * units[k]
            acc += scale * intra_prod[j]
            acc += E_intra[j] @ su
            d_units[j] += acc
            dk = Ecr.T @ su
            dk -= c_tau[:, None] * units[j]
            d_units[k] += dk
    else:
        for j, k in ordered_pairs(K):
            U, W = units[j], units[k]
            L, P_cross, P_intra = _direction_losses(U, W, tau, include_positive)
            losses[(j, k)] = L
            c_tau = np.asarray(coeffs[(j, k)], dtype=np.float64) / tau
            G_cross = P_cross * c_tau[:, None]
            np.fill_diagonal(G_cross, G_cross.diagonal() - c_tau)
            G_intra = P_intra * c_tau[:, None]
            sym = G_intra + G_intra.T
            d_units[j] += G_cross @ W
            d_units[j] += sym @ U
            d_units[k] += G_cross.T @ U
    d_latents = []
    for Z, U, dU in zip(latents, units, d_units):
        norms = np.linalg.norm(Z, axis=1, keepdims=True)
        proj = (dU * U).sum(axis=1, keepdims=True)
        dU -= proj * U
        dU /= norms
        d_latents.append(dU)
    return losses, d_latents


@dataclass
class ReferenceBank:
    """Unit-normalized training latents that stand in for batch mates when
    scoring new samples one at a time."""

    units: list[np.ndarray]

    @classmethod
    def from_latents(cls, latents) -> "ReferenceBank":
        if len(latents) < 2:
            raise DimensionError(f"need K >= 2 views, got {len(latents)}")
        m, d = latents[0].shape
        if m < 2:
            raise EmptyBank(f"reference bank needs at least 2 rows, got {m}")
        for k, Z in enumerate(latents):
            if Z.shape != (m, d):
                raise DimensionError(
                    f"bank view {k} has shape {Z.shape}, expected {(m, d)}"
                )
        return cls(units=[normalize_rows(Z) for Z in latents])

    @property
    def n_views(self) -> int:
        return len(self.units)

    @property
    def size(self) -> int:
        return self.units[0].shape[0]


def contrastive_scores(
    bank: ReferenceBank, latents, tau: float, include_positive: bool = False
) -> np.ndarray:
    """Per-sample, per-view consistency score against the reference bank.

    Entry [i, k] averages -log p over the K-1 directions that target view k,
    with the bank supplying both negative pools. Rows are scored one at a
    time, so results do not depend on which rows share the call.
    """
    _check_tau(tau)
    K = bank.n_views
    if len(latents) != K:
        raise DimensionError(f"{len(latents)} views vs bank with {K}")
    n = latents[0].shape[0]
    d = bank.units[0].shape[1]
    for k, Z in enumerate(latents):
        if Z.shape != (n, d):
            raise DimensionError(
                f"view {k} latents have shape {Z.shape}, expected {(n, d)}"
            )
    scores = np.empty((n, K))
    for i in range(n):
        u = [normalize_rows(Z[i : i + 1])[0] for Z in latents]
        # dots[a][b]: cosines of this row's view-b latent vs bank view a
        dots = [[bank.units[a] @ u[b] for b in range(K)] for a in range(K)]
        for k in range(K):
            acc = 0.0
            for j in range(K):
                if j == k:
                    continue
                log_num = float(u[j] @ u[k]) / tau
                terms = np.concatenate([dots[k][j], dots[j][j]]) / tau
                if include_positive:
                    terms = np.append(terms, log_num)
                acc += log_num - logsumexp(terms)
            scores[i, k] = -acc / (K - 1)
    counters.scored_rows += n
    return scores
