"""Fused anomaly scores, ranking metrics, and the experiment drivers built
on them (ablations, contamination sweeps, fusion-coefficient grids).

Scores follow the "higher = more anomalous" convention throughout. The
fused score of a sample is the weight-allocated sum over views of
``alpha * reconstruction + beta * consistency``; it is always computed by
the same scalar left-to-right loop so that a score file re-parsed from
disk reproduces every fused value bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import allocation as alloc_mod
from . import trainer as trainer_mod
from .contrastive import contrastive_scores
from .data import MultiViewDataset, SplitSpec, apply_scaler, one_class_split
from .errors import (
    ConfigError,
    DegenerateInput,
    DimensionError,
    FormatError,
    ModelIncomplete,
    SingleClass,
)
from .trainer import TrainConfig, TrainedModel

__all__ = [
    "ScoreBreakdown",
    "MetricReport",
    "fuse_sample",
    "score_components",
    "score",
    "auroc",
    "auprc",
    "metric_report",
    "evaluate",
    "serialize_scores",
    "write_scores",
    "read_scores",
    "file_digest",
    "write_metrics",
    "ablate",
    "robustness_sweep",
    "sensitivity_grid",
    "write_sensitivity",
]


# ---------------------------------------------------------------------------
# per-sample score records


@dataclass(frozen=True)
class ScoreBreakdown:
    """One sample's scores: per-view parts, weight row, and the fused total."""

    sample_id: str
    rec: tuple
    con: tuple
    weights: tuple
    fused: float
    label: int | None = None

    def __post_init__(self):
        k = len(self.weights)
        if len(self.rec) != k or len(self.con) != k:
            raise DimensionError(
                f"rec/con/weights lengths disagree: "
                f"{len(self.rec)}/{len(self.con)}/{k}"
            )
        if k == 0:
            raise DimensionError("empty score breakdown")
        if any(r < 0 for r in self.rec):
            raise DegenerateInput("negative reconstruction score")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise DegenerateInput(
                f"weight row sums to {sum(self.weights)!r}, expected 1"
            )
        if self.label is not None and self.label not in (0, 1):
            raise DegenerateInput(f"label must be 0 or 1, got {self.label!r}")


def fuse_sample(rec, con, weights, alpha: float, beta: float) -> float:
    # plain scalar loop: the fixed evaluation order is what makes fused
    # scores reproducible after a text round trip
    s = 0.0
    a = float(alpha)
    b = float(beta)
    for w, r, c in zip(weights, rec, con):
        s += float(w) * (a * float(r) + b * float(c))
    return s


def score_components(model: TrainedModel, ds: MultiViewDataset, with_con=None):
    """Per-view score pieces for a dataset: (rec, con, weights), each (N, K).

    ``with_con`` overrides the model's beta > 0 test; when consistency
    scores are off the contrastive code path is never entered.
    """
    cfg = model.config
    if ds.n_views != model.n_views:
        raise DimensionError(
            f"dataset has {ds.n_views} views, model expects {model.n_views}"
        )
    if with_con is None:
        with_con = cfg.beta > 0
    if with_con and model.bank is None:
        raise ModelIncomplete("consistency scoring requires a reference bank")

    scaled = apply_scaler(model.scaler, ds)
    rec = np.stack(
        [m.recon_scores(X) for m, X in zip(model.autoencoders, scaled.views)],
        axis=1,
    )
    if with_con:
        latents = [
            m.encode_eval(X) for m, X in zip(model.autoencoders, scaled.views)
        ]
        con = contrastive_scores(
            model.bank, latents, cfg.temperature, not cfg.faithful_infonce
        )
    else:
        con = np.zeros_like(rec)
    weights = alloc_mod.estimate_weights(model.allocation, scaled.views)
    return rec, con, weights


def score(model: TrainedModel, ds: MultiViewDataset) -> list:
    """Score every sample of ``ds`` with a trained model.

    Pipeline per sample: min-max scale, eval-mode forward per view,
    reconstruction error, consistency vs the reference bank, weight row,
    fused total. Eval-mode normalization uses stored running statistics,
    so a sample's scores do not depend on its batch mates.
    """
    cfg = model.config
    rec, con, weights = score_components(model, ds)
    rows = []
    for i in range(ds.n_samples):
        w_row = tuple(float(x) for x in weights[i])
        r_row = tuple(float(x) for x in rec[i])
        c_row = tuple(float(x) for x in con[i])
        rows.append(
            ScoreBreakdown(
                sample_id=ds.sample_ids[i],
                rec=r_row,
                con=c_row,
                weights=w_row,
                fused=fuse_sample(r_row, c_row, w_row, cfg.alpha, cfg.beta),
                label=None if ds.labels is None else int(ds.labels[i]),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# ranking metrics


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.size == 0:
        raise SingleClass("no samples to rank")
    if not np.isfinite(s).all():
        raise DegenerateInput("scores contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise DegenerateInput("labels must be 0 or 1")
    y = y.astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(
            f"need both classes, got {n_pos} positives / {n_neg} negatives"
        )
    return s, y, n_pos, n_neg


def _midranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks, ties replaced by the mean rank of their group."""
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    return (ends - (counts - 1) / 2.0)[inv]


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half.

    Rank formulation: exact, O(N log N), identical to counting ordered
    pairs one by one.
    """
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    ranks = _midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending score thresholds.

    Tied scores form a single threshold step, so a constant score vector
    gives exactly the positive prevalence.
    """
    s, y, n_pos, _ = _check_binary(scores, labels)
    _, inv, counts = np.unique(-s, return_inverse=True, return_counts=True)
    tp_group = np.bincount(inv, weights=(y == 1).astype(float), minlength=len(counts))
    tp_cum = np.cumsum(tp_group)
    n_cum = np.cumsum(counts)
    # recall steps are formed before the product so a fully tied vector
    # yields 1.0 * prevalence with no rounding
    return float(np.sum((tp_group / n_pos) * (tp_cum / n_cum)))


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    auprc: float
    n_pos: int
    n_neg: int
    variant: str = "full"
    seed: int = 0
    digest: str = ""


def metric_report(scores, labels, variant="full", seed=0, digest="") -> MetricReport:
    return MetricReport(
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        n_pos=int(np.sum(np.asarray(labels) == 1)),
        n_neg=int(np.sum(np.asarray(labels) == 0)),
        variant=variant,
        seed=seed,
        digest=digest,
    )


def evaluate(rows, view_names, variant="full", seed=0) -> MetricReport:
    """Metric report for labeled score rows; digest covers the serialized file."""
    if any(r.label is None for r in rows):
        raise ConfigError("evaluation requires labels on every score row")
    text = serialize_scores(rows, view_names)
    return metric_report(
        [r.fused for r in rows],
        [r.label for r in rows],
        variant=variant,
        seed=seed,
        digest=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


# ---------------------------------------------------------------------------
# score and metric files


def _fmt(x) -> str:
    return format(float(x), ".17g")


def serialize_scores(rows, view_names) -> str:
    """CSV text for score rows: id,label?,score, then per-view rec/con/w."""
    names = list(view_names)
    k = len(names)
    if not rows:
        raise FormatError("no score rows to serialize")
    labeled = rows[0].label is not None
    header = ["id"] + (["label"] if labeled else []) + ["score"]
    header += [f"rec_{v}" for v in names]
    header += [f"con_{v}" for v in names]
    header += [f"w_{v}" for v in names]
    lines = [",".join(header)]
    for r in rows:
        if len(r.weights) != k:
            raise DimensionError(
                f"row {r.sample_id!r} has {len(r.weights)} views, header has {k}"
            )
        if (r.label is None) == labeled:
            raise FormatError("mixed labeled and unlabeled score rows")
        if "," in r.sample_id or "\n" in r.sample_id:
            raise FormatError(f"sample id {r.sample_id!r} cannot be written to csv")
        fields = [r.sample_id]
        if labeled:
            fields.append(str(r.label))
        fields.append(_fmt(r.fused))
        fields += [_fmt(x) for x in r.rec]
        fields += [_fmt(x) for x in r.con]
        fields += [_fmt(x) for x in r.weights]
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_scores(path, rows, view_names) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_scores(rows, view_names))


def _parse_float(token: str, path, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: bad float {token!r}") from None


def read_scores(path):
    """Parse a score CSV back into (rows, view_names)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{path}: empty score file")
    header = lines[0].split(",")
    if not header or header[0] != "id":
        raise FormatError(f"{path}: header must start with 'id'")
    pos = 1
    labeled = pos < len(header) and header[pos] == "label"
    if labeled:
        pos += 1
    if pos >= len(header) or header[pos] != "score":
        raise FormatError(f"{path}: missing 'score' column")
    pos += 1
    rest = header[pos:]
    if not rest or len(rest) % 3 != 0:
        raise FormatError(f"{path}: expected rec_/con_/w_ column triples")
    k = len(rest) // 3
    names = []
    for a, prefix in zip(range(0, 3 * k, k), ("rec_", "con_", "w_")):
        for col in rest[a : a + k]:
            if not col.startswith(prefix):
                raise FormatError(f"{path}: column {col!r} should start {prefix!r}")
        block = [col[len(prefix) :] for col in rest[a : a + k]]
        if not names:
            names = block
        elif block != names:
            raise FormatError(f"{path}: view names disagree across column blocks")

    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise FormatError(
                f"{path}:{lineno}: {len(fields)} fields, header has {len(header)}"
            )
        it = iter(fields)
        sample_id = next(it)
        label = None
        if labeled:
            token = next(it)
            if token not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: bad label {token!r}")
            label = int(token)
        fused = _parse_float(next(it), path, lineno)
        vals = [_parse_float(tok, path, lineno) for tok in it]
        rows.append(
            ScoreBreakdown(
                sample_id=sample_id,
                rec=tuple(vals[:k]),
                con=tuple(vals[k : 2 * k]),
                weights=tuple(vals[2 * k :]),
                fused=fused,
                label=label,
            )
        )
    return rows, names


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_metrics(path, report: MetricReport) -> None:
    doc = {
        "auroc": report.auroc,
        "auprc": report.auprc,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "variant": report.variant,
        "seed": report.seed,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# experiment drivers


def _split_fit_score(ds, cfg, variant, ratio=0.0):
    spec = SplitSpec(seed=cfg.seed, injected_anomaly_ratio=ratio)
    train, test = one_class_split(ds, spec)
    model = trainer_mod.fit(train, cfg, variant=variant)
    return model, score(model, test)


def ablate(variant: str, ds: MultiViewDataset, cfg: TrainConfig) -> MetricReport:
    """Train and evaluate one ablation variant on the standard split."""
    model, rows = _split_fit_score(ds, cfg, variant)
    return evaluate(rows, model.view_names, variant=variant, seed=cfg.seed)


def robustness_sweep(ds: MultiViewDataset, cfg: TrainConfig, ratios) -> list:
    """Refit with anomalies injected into training at each ratio, in order.

    Every ratio reuses the same base seed, so ratio 0 reproduces the
    standard protocol exactly.
    """
    reports = []
    for ratio in ratios:
        model, rows = _split_fit_score(ds, cfg, "full", ratio=float(ratio))
        reports.append(
            evaluate(rows, model.view_names, variant="full", seed=cfg.seed)
        )
    return reports


def sensitivity_grid(ds: MultiViewDataset, cfg: TrainConfig, alphas, betas):
    """AUROC grid over fusion coefficients, shape (len(alphas), len(betas)).

    The coefficients only enter at fusion time, so the model is fit once
    and every cell re-fuses the same per-view score components.
    """
    alphas = [float(a) for a in alphas]
    betas = [float(b) for b in betas]
    if not alphas or not betas:
        raise ConfigError("alpha and beta lists must be non-empty")
    if any(a < 0 for a in alphas) or any(b < 0 for b in betas):
        raise ConfigError("fusion coefficients must be >= 0")
    need_con = any(b > 0 for b in betas)
    fit_cfg = cfg
    if need_con and cfg.beta <= 0:
        # force the reference bank to exist; beta itself has no effect on fitting
        fit_cfg = replace(cfg, beta=1.0)
    train, test = one_class_split(ds, SplitSpec(seed=cfg.seed))
    model = trainer_mod.fit(train, fit_cfg)
    rec, con, weights = score_components(model, test, with_con=need_con)
    n = rec.shape[0]
    grid = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            fused = [fuse_sample(rec[r], con[r], weights[r], a, b) for r in range(n)]
            grid[i, j] = auroc(fused, test.labels)
    return grid


def write_sensitivity(path, alphas, betas, grid) -> None:
    grid = np.asarray(grid)
    if grid.shape != (len(alphas), len(betas)):
        raise DimensionError(
            f"grid shape {grid.shape} vs {(len(alphas), len(betas))} coefficients"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("alpha,beta,auroc\n")
        for i, a in enumerate(alphas):
            for j, b in enumerate(betas):
                fh.write(f"{_fmt(a)},{_fmt(b)},{_fmt(grid[i, j])}\n")
