"""Two-stage training loop, Adam optimizer, config, and model persistence.

Stage 1 trains the per-view autoencoder backbones against the composite
objective with hard-coded uniform view weights. Stage 2 freezes the
backbones, recomputes per-sample losses once in eval mode, and trains only
the allocation estimator to weigh those frozen losses.

The single run seed drives every random choice through fixed stream ids
(see ``make_rng``): backbone init (2, view), stage-1 shuffles (3, epoch),
bank sampling (4,), estimator init (5,), stage-2 shuffles (6, epoch), and
the fixed stage-2 batch partition (7,).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import allocation as alloc_mod
from . import contrastive as con_mod
from .backbone import ViewAutoencoder, init_autoencoder, recon_errors
from .data import (
    MinMaxScaler,
    MultiViewDataset,
    apply_scaler,
    fit_scaler,
    load_matrix,
    write_matrix,
)
from .errors import ConfigError, ModelIncomplete, NumericDivergence
from .linalg import PcaModel, make_rng

VARIANTS = ("full", "no_aa", "no_cc", "no_ae")

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults follow the reference configuration."""

    stage1_epochs: int = 100
    stage2_epochs: int = 50
    backbone_lr: float = 1e-3
    allocation_lr: float = 1e-3
    batch_size: int | None = 256  # None trains full-batch (and skips shuffling)
    contrastive_loss_weight: float = 1.0
    temperature: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    faithful_infonce: bool = True
    encoder_hidden: tuple[int, ...] = (512, 256)
    latent_dim: int = 128
    pca_dim: int = 128
    estimator_hidden: int = 64
    bank_size: int = 1024

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.backbone_lr <= 0 or self.allocation_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (or null for full-batch)")
        if self.contrastive_loss_weight < 0:
            raise ConfigError("contrastive_loss_weight must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.weight_decay != 0:
            raise ConfigError("weight_decay is pinned to 0 in this setup")
        if self.latent_dim < 1 or self.pca_dim < 1 or self.estimator_hidden < 1:
            raise ConfigError("architecture widths must be positive")
        if any(h < 1 for h in self.encoder_hidden):
            raise ConfigError("encoder_hidden widths must be positive")
        if self.bank_size < 2:
            raise ConfigError("bank_size must be >= 2")
        object.__setattr__(self, "encoder_hidden", tuple(self.encoder_hidden))


def config_from_dict(doc: dict) -> TrainConfig:
    """Strict config parsing: unknown keys rejected, missing keys defaulted."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    doc = dict(doc)
    if doc.get("batch_size") == "full":
        doc["batch_size"] = None
    try:
        return TrainConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


class Adam:
    """Adam with bias correction; updates the given arrays in place.

    Moment state lives in flat buffers (one slice per parameter) so each
    step runs a fixed handful of vectorized ops regardless of how many
    parameter arrays there are.
    """

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._slices = {}
        total = 0
        for k, v in params.items():
            self._slices[k] = (total, total + v.size)
            total += v.size
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self._g = np.empty(total)
        self._buf = np.empty(total)

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """First and second moment for one parameter, in its shape."""
        s, e = self._slices[name]
        shape = self.params[name].shape
        return self.m[s:e].reshape(shape), self.v[s:e].reshape(shape)

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g, m, v, buf = self._g, self.m, self.v, self._buf
        for name, (s, e) in self._slices.items():
            g[s:e] = grads[name].ravel()
        # p -= lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections
        # folded into scalars so the array work stays in scratch buffers;
        # walking the state in cache-sized chunks keeps each value resident
        # across the whole op pipeline instead of re-streaming it from memory
        lr_t = self.lr / (1 - b1**self.t)
        inv_sqrt_c2 = 1.0 / np.sqrt(1 - b2**self.t)
        for s in range(0, g.size, 32768):
            e = min(s + 32768, g.size)
            gc, mc, vc, bc = g[s:e], m[s:e], v[s:e], buf[s:e]
            mc *= b1
            np.multiply(gc, 1 - b1, out=bc)
            mc += bc
            vc *= b2
            np.multiply(gc, gc, out=bc)
            bc *= 1 - b2
            vc += bc
            np.sqrt(vc, out=bc)
            bc *= inv_sqrt_c2
            bc += self.eps
            np.divide(mc, bc, out=bc)
            bc *= lr_t
        for name, (s, e) in self._slices.items():
            p = self.params[name]
            p -= buf[s:e].reshape(p.shape)


def total_loss(rec_losses, con_losses, W, lam: float):
    """Composite objective: batch mean of per-sample weighted losses.

    ``rec_losses`` is (B, K); ``con_losses`` maps ordered view pairs (j, k)
    to per-sample loss vectors (empty or None when the term is off); each
    unordered pair enters through the mean of its two ordered directions,
    weighted by the mean of the two view weights.

    Returns (scalar, per-sample vector).
    """
    rec_losses = np.asarray(rec_losses, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if rec_losses.shape != W.shape:
        raise ConfigError(f"loss shape {rec_losses.shape} vs weights {W.shape}")
    per_sample = (W * rec_losses).sum(axis=1)
    if lam > 0 and con_losses:
        K = W.shape[1]
        for j in range(K):
            for k in range(j + 1, K):
                pair_mean = 0.5 * (con_losses[(j, k)] + con_losses[(k, j)])
                omega = 0.5 * (W[:, j] + W[:, k])
                per_sample = per_sample + lam * omega * pair_mean
    return float(per_sample.mean()), per_sample


def _batch_slices(n: int, batch_size: int | None):
    """Start/end offsets per batch; a trailing singleton is folded into the
    previous batch because batch statistics need at least 2 rows."""
    if batch_size is None or batch_size >= n:
        return [(0, n)]
    bounds = []
    s = 0
    while s < n:
        e = min(s + batch_size, n)
        bounds.append((s, e))
        s = e
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        prev = bounds.pop()
        bounds.append((prev[0], last[1]))
    return bounds


def backbone_batch_grads(
    models: list[ViewAutoencoder],
    X_batch: list[np.ndarray],
    W: np.ndarray,
    lam: float,
    tau: float,
    include_positive: bool,
    include_recon: bool = True,
):
    """One training-mode pass over a batch: composite loss and all backbone
    parameter gradients, keyed "v{k}/{layer}/{param}".

    The per-sample weighting follows the composite objective: view k's
    reconstruction term carries w_i^(k), each unordered contrastive pair
    carries lam * (w_j + w_k)/2, and everything is averaged over the batch.
    """
    K = len(models)
    b = X_batch[0].shape[0]
    traces = [m.forward_train(X) for m, X in zip(models, X_batch)]
    rec = np.zeros((b, K))
    if include_recon:
        for k in range(K):
            rec[:, k] = recon_errors(X_batch[k], traces[k].recon)

    con_losses = None
    d_latents = [None] * K
    if lam > 0 and K >= 2:
        coeffs = {}
        for j, k in con_mod.ordered_pairs(K):
            omega = 0.5 * (W[:, j] + W[:, k])
            coeffs[(j, k)] = lam * omega / (2.0 * b)
        con_losses, d_latents = con_mod.batch_losses_and_grads(
            [tr.latent for tr in traces],
            coeffs,
            tau,
            include_positive=include_positive,
        )

    loss, per_sample = total_loss(rec, con_losses, W, lam)
    grads = {}
    for k in range(K):
        if include_recon:
            d_recon = (2.0 / b) * W[:, k : k + 1] * (traces[k].recon - X_batch[k])
        else:
            d_recon = np.zeros_like(traces[k].recon)
        g = models[k].backward(traces[k], d_recon, d_latent=d_latents[k])
        for name, arr in g.items():
            grads[f"v{k}/{name}"] = arr
    return loss, per_sample, grads


def train_stage1(X_views: list[np.ndarray], cfg: TrainConfig, include_recon=True):
    """Backbone training with uniform weights; returns (models, epoch losses)."""
    K = len(X_views)
    n = X_views[0].shape[0]
    models = [
        init_autoencoder(
            X_views[k].shape[1],
            make_rng(cfg.seed, 2, k),
            hidden=cfg.encoder_hidden,
            latent_dim=cfg.latent_dim,
        )
        for k in range(K)
    ]
    params = {}
    for k, m in enumerate(models):
        for name, arr in m.named_params().items():
            params[f"v{k}/{name}"] = arr
    adam = Adam(params, lr=cfg.backbone_lr)
    lam = cfg.contrastive_loss_weight
    history = []
    for epoch in range(cfg.stage1_epochs):
        if cfg.batch_size is None:
            perm = np.arange(n)
        else:
            perm = make_rng(cfg.seed, 3, epoch).permutation(n)
        epoch_loss = 0.0
        for s, e in _batch_slices(n, cfg.batch_size):
            idx = perm[s:e]
            X_batch = [X[idx] for X in X_views]
            W = np.full((len(idx), K), 1.0 / K)
            loss, _, grads = backbone_batch_grads(
                models,
                X_batch,
                W,
                lam,
                cfg.temperature,
                include_positive=not cfg.faithful_infonce,
                include_recon=include_recon,
            )
            if not np.isfinite(loss):
                raise NumericDivergence(
                    f"stage 1 epoch {epoch} batch [{s}:{e}]: loss {loss}"
                )
            adam.step(grads)
            for m in models:
                m.version += 1
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    return models, history


def _frozen_per_sample_losses(models, X_views, cfg: TrainConfig, include_recon=True):
    """Eval-mode per-sample loss pieces for stage 2, cached once.

    Returns a (N, K) matrix where entry [i, k] collects everything that
    multiplies w_i^(k) in the composite objective: the view's reconstruction
    error plus lam/2 times the summed pair-mean contrastive losses of the
    pairs containing k. Contrastive losses use one fixed seeded batch
    partition (stream 7), matching the mini-batch negatives convention.
    """
    K = len(X_views)
    n = X_views[0].shape[0]
    a = np.zeros((n, K))
    if include_recon:
        for k in range(K):
            a[:, k] = models[k].recon_scores(X_views[k])
    lam = cfg.contrastive_loss_weight
    if lam > 0 and K >= 2:
        if cfg.batch_size is None:
            perm = np.arange(n)
        else:
            perm = make_rng(cfg.seed, 7).permutation(n)
        for s, e in _batch_slices(n, cfg.batch_size):
            idx = perm[s:e]
            latents = [m.encode_eval(X[idx]) for m, X in zip(models, X_views)]
            losses = con_mod.batch_losses(
                latents, cfg.temperature, include_positive=not cfg.faithful_infonce
            )
            for j in range(K):
                for k in range(j + 1, K):
                    pair_mean = 0.5 * (losses[(j, k)] + losses[(k, j)])
                    a[idx, j] += 0.5 * lam * pair_mean
                    a[idx, k] += 0.5 * lam * pair_mean
    return a


def allocation_batch_grads(est, aligned_batch, a_batch):
    """Stage-2 step: loss mean_i sum_k w_ik a_ik and estimator grads."""
    raw, caches = alloc_mod.raw_scores(est, aligned_batch)
    W = alloc_mod.normalize_weights(raw)
    b = a_batch.shape[0]
    loss = float((W * a_batch).sum() / b)
    d_raw = alloc_mod.normalize_weights_backward(raw, a_batch / b)
    grads = alloc_mod.raw_scores_backward(est, caches, d_raw)
    return loss, grads


def train_stage2(
    models, X_views: list[np.ndarray], cfg: TrainConfig, include_recon=True
):
    """Allocation training over frozen backbones; returns (state, history)."""
    n = X_views[0].shape[0]
    a = _frozen_per_sample_losses(models, X_views, cfg, include_recon=include_recon)
    pcas = alloc_mod.fit_alignment(X_views, d_target=cfg.pca_dim)
    est = alloc_mod.init_estimator(
        pcas[0].d_out, make_rng(cfg.seed, 5), hidden=cfg.estimator_hidden
    )
    aligned = [
        np.ascontiguousarray(A)
        for A in alloc_mod.align(
            alloc_mod.AllocationState(n_views=len(X_views), frozen=False, pca=pcas),
            X_views,
        )
    ]
    adam = Adam(est.named_params(), lr=cfg.allocation_lr)
    history = []
    for epoch in range(cfg.stage2_epochs):
        if cfg.batch_size is None:
            perm = np.arange(n)
        else:
            perm = make_rng(cfg.seed, 6, epoch).permutation(n)
        epoch_loss = 0.0
        for s, e in _batch_slices(n, cfg.batch_size):
            idx = perm[s:e]
            loss, grads = allocation_batch_grads(
                est, [A[idx] for A in aligned], a[idx]
            )
            if not np.isfinite(loss):
                raise NumericDivergence(
                    f"stage 2 epoch {epoch} batch [{s}:{e}]: loss {loss}"
                )
            adam.step(grads)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    state = alloc_mod.AllocationState(
        n_views=len(X_views), frozen=False, pca=pcas, estimator=est
    )
    return state, history


@dataclass
class TrainedModel:
    """Everything needed to score new samples."""

    autoencoders: list[ViewAutoencoder]
    allocation: alloc_mod.AllocationState
    scaler: MinMaxScaler
    bank: con_mod.ReferenceBank | None
    config: TrainConfig
    variant: str
    history: dict
    view_names: list[str]

    @property
    def n_views(self) -> int:
        return len(self.autoencoders)


def effective_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Fold an ablation variant into the config it actually trains with."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == "no_cc":
        return replace(cfg, contrastive_loss_weight=0.0, beta=0.0)
    if variant == "no_ae":
        if cfg.contrastive_loss_weight <= 0:
            raise ConfigError("no_ae with zero contrastive weight leaves no loss")
        return replace(cfg, alpha=0.0)
    return cfg


def fit(
    train: MultiViewDataset,
    cfg: TrainConfig,
    variant: str = "full",
    out_dir=None,
    view_names=None,
) -> TrainedModel:
    """Full pipeline: scaler -> stage 1 -> bank -> stage 2 -> assembled model.

    ``variant`` selects an ablation: no_aa skips stage 2 (uniform weights),
    no_cc drops the contrastive term everywhere, no_ae drops the
    reconstruction term from training and from the fused score.
    """
    if train.n_views < 2:
        raise ConfigError(f"need K >= 2 views, got {train.n_views}")
    cfg = effective_config(cfg, variant)
    include_recon = variant != "no_ae"
    names = list(view_names) if view_names else [f"view{k}" for k in range(train.n_views)]
    if len(names) != train.n_views:
        raise ConfigError(f"{len(names)} view names for {train.n_views} views")

    scaler = fit_scaler(train)
    scaled = apply_scaler(scaler, train)
    X_views = scaled.views

    models, hist1 = train_stage1(X_views, cfg, include_recon=include_recon)

    bank = None
    if cfg.beta > 0:
        n = X_views[0].shape[0]
        size = min(cfg.bank_size, n)
        idx = np.sort(make_rng(cfg.seed, 4).choice(n, size=size, replace=False))
        bank = con_mod.ReferenceBank.from_latents(
            [m.encode_eval(X[idx]) for m, X in zip(models, X_views)]
        )

    hist2 = []
    if variant == "no_aa":
        state = alloc_mod.AllocationState(n_views=train.n_views, frozen=True)
    else:
        state, hist2 = train_stage2(models, X_views, cfg, include_recon=include_recon)

    model = TrainedModel(
        autoencoders=models,
        allocation=state,
        scaler=scaler,
        bank=bank,
        config=cfg,
        variant=variant,
        history={"stage1": hist1, "stage2": hist2},
        view_names=names,
    )
    if out_dir is not None:
        save_model(model, out_dir)
    return model


# ---------------------------------------------------------------------------
# persistence: meta.json + one float64 MVEB blob per tensor


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(path, np.atleast_2d(arr), dtype="float64")


def _read_blob(path: Path, shape: tuple) -> np.ndarray:
    if not path.exists():
        raise ModelIncomplete(f"missing model blob {path}")
    arr = load_matrix(path)
    if int(np.prod(shape)) != arr.size:
        raise ModelIncomplete(f"{path}: has {arr.size} values, expected shape {shape}")
    return np.ascontiguousarray(arr.reshape(shape))


def save_model(model: TrainedModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(model.autoencoders):
        for name, arr in m.state_arrays().items():
            _write_blob(out / "backbone" / f"v{k}" / f"{name}.mveb", arr)
    for k, (lo, hi) in enumerate(zip(model.scaler.mins, model.scaler.maxs)):
        _write_blob(out / "scaler" / f"v{k}" / "min.mveb", lo)
        _write_blob(out / "scaler" / f"v{k}" / "max.mveb", hi)
    if model.bank is not None:
        for k, U in enumerate(model.bank.units):
            _write_blob(out / "bank" / f"v{k}.mveb", U)
    alloc = model.allocation
    if not alloc.frozen:
        for k, p in enumerate(alloc.pca):
            _write_blob(out / "allocation" / f"pca{k}" / "mean.mveb", p.mean)
            _write_blob(out / "allocation" / f"pca{k}" / "components.mveb", p.components)
            _write_blob(out / "allocation" / f"pca{k}" / "variance.mveb", p.explained_variance)
        for name, arr in alloc.estimator.named_params().items():
            _write_blob(out / "allocation" / "estimator" / f"{name}.mveb", arr)

    cfg_doc = asdict(model.config)
    cfg_doc["encoder_hidden"] = list(cfg_doc["encoder_hidden"])
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "variant": model.variant,
        "view_names": model.view_names,
        "view_dims": [m.input_dim for m in model.autoencoders],
        "config": cfg_doc,
        "history": model.history,
        "bank_rows": None if model.bank is None else model.bank.size,
        "allocation_frozen": alloc.frozen,
        "pca_dim": None if alloc.frozen else alloc.pca[0].d_out,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return out


def load_model(model_dir) -> TrainedModel:
    out = Path(model_dir)
    meta_path = out / "meta.json"
    if not meta_path.exists():
        raise ModelIncomplete(f"{out}: no meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelIncomplete(
            f"{out}: model format {meta.get('format_version')} not supported"
        )
    cfg = config_from_dict(meta["config"])
    dims = meta["view_dims"]
    K = len(dims)

    models = []
    throwaway = make_rng(0)
    for k, d in enumerate(dims):
        m = init_autoencoder(
            d, throwaway, hidden=cfg.encoder_hidden, latent_dim=cfg.latent_dim
        )
        for name, arr in m.state_arrays().items():
            arr[...] = _read_blob(out / "backbone" / f"v{k}" / f"{name}.mveb", arr.shape)
        models.append(m)

    mins, maxs = [], []
    for k, d in enumerate(dims):
        mins.append(_read_blob(out / "scaler" / f"v{k}" / "min.mveb", (d,)))
        maxs.append(_read_blob(out / "scaler" / f"v{k}" / "max.mveb", (d,)))
    scaler = MinMaxScaler(mins=mins, maxs=maxs)

    bank = None
    if meta["bank_rows"] is not None:
        units = [
            _read_blob(out / "bank" / f"v{k}.mveb", (meta["bank_rows"], cfg.latent_dim))
            for k in range(K)
        ]
        bank = con_mod.ReferenceBank(units=units)

    if meta["allocation_frozen"]:
        state = alloc_mod.AllocationState(n_views=K, frozen=True)
    else:
        d_out = meta["pca_dim"]
        pcas = []
        for k, d in enumerate(dims):
            pcas.append(
                PcaModel(
                    mean=_read_blob(out / "allocation" / f"pca{k}" / "mean.mveb", (d,)),
                    components=_read_blob(
                        out / "allocation" / f"pca{k}" / "components.mveb", (d, d_out)
                    ),
                    explained_variance=_read_blob(
                        out / "allocation" / f"pca{k}" / "variance.mveb", (d_out,)
                    ),
                )
            )
        est = alloc_mod.MlpEstimator(
            W1=_read_blob(
                out / "allocation" / "estimator" / "W1.mveb",
                (d_out, cfg.estimator_hidden),
            ),
            b1=_read_blob(
                out / "allocation" / "estimator" / "b1.mveb", (cfg.estimator_hidden,)
            ),
            W2=_read_blob(
                out / "allocation" / "estimator" / "W2.mveb", (cfg.estimator_hidden, 1)
            ),
            b2=_read_blob(out / "allocation" / "estimator" / "b2.mveb", (1,)),
        )
        state = alloc_mod.AllocationState(
            n_views=K, frozen=False, pca=pcas, estimator=est
        )

    return TrainedModel(
        autoencoders=models,
        allocation=state,
        scaler=scaler,
        bank=bank,
        config=cfg,
        variant=meta["variant"],
        history=meta["history"],
        view_names=meta["view_names"],
    )
