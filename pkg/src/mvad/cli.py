"""Command-line front end.

Thin shell by design: this module only parses arguments, dispatches to the
library, maps exceptions to exit codes, and appends a provenance line to a
run log. All numeric work lives in the library modules, which are imported
lazily inside the handlers.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric
divergence during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

from .errors import MvadError, ModelIncomplete, NumericDivergence

_VARIANT_SPELLINGS = {
    "full": "full",
    "no-aa": "no_aa",
    "no-cc": "no_cc",
    "no-ae": "no_ae",
    "no_aa": "no_aa",
    "no_cc": "no_cc",
    "no_ae": "no_ae",
}


# ---------------------------------------------------------------------------
# argument value parsers (usage errors -> exit 2 via argparse)


def parse_values(text: str) -> list:
    """Float list: either '0,0.02,0.1' or an inclusive 'begin:end:step' range."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError(
                f"range must be begin:end:step, got {text!r}"
            )
        try:
            begin, end, step = (float(p) for p in parts)
        except ValueError:
            raise argparse.ArgumentTypeError(f"non-numeric range {text!r}") from None
        if step <= 0:
            raise argparse.ArgumentTypeError(f"range step must be > 0 in {text!r}")
        if end < begin:
            raise argparse.ArgumentTypeError(f"range end below begin in {text!r}")
        count = int((end - begin) / step + 1e-6) + 1
        return [begin + i * step for i in range(count)]
    try:
        vals = [float(p) for p in text.split(",") if p.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def parse_variant(text: str) -> str:
    try:
        return _VARIANT_SPELLINGS[text.strip()]
    except KeyError:
        raise argparse.ArgumentTypeError(
            f"unknown variant {text!r}, expected full, no-aa, no-cc or no-ae"
        ) from None


def parse_variant_list(text: str) -> list:
    return [parse_variant(p) for p in text.split(",") if p.strip() != ""]


def parse_positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# provenance


def _build_version() -> str:
    try:
        proc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if proc.returncode == 0 and proc.stdout.strip():
            return proc.stdout.strip()
    except OSError:
        pass
    from . import __version__

    return f"v{__version__}"


def _append_run_log(out_dir, args, wall_s: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()
    line = {
        "command": args.command,
        "config_digest": digest,
        "seed": getattr(args, "seed", None),
        "wall_time_s": round(wall_s, 6),
        "version": _build_version(),
    }
    with open(out_dir / "run_log.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(line) + "\n")


def _load_train_config(config_path, seed):
    from dataclasses import replace

    from .trainer import TrainConfig, load_config

    cfg = load_config(config_path) if config_path else TrainConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _fmt(x) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# handlers; each returns the run-log directory, or None for read-only commands


def _cmd_generate_synthetic(args):
    from .data import SynthConfig, generate_synthetic, save_dataset

    cfg = SynthConfig(
        n_views=args.views,
        dims=args.dims,
        n_normal=args.n_normal,
        n_anomaly=args.n_anomaly,
        latent_rank=args.latent_rank,
        noise=args.noise,
        anomaly_mode=args.mode,
        seed=args.seed,
    )
    ds = generate_synthetic(cfg)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {manifest} ({ds.n_samples} samples, {ds.n_views} views)")
    return args.out


def _cmd_train(args):
    from .data import load_dataset, load_manifest
    from .trainer import fit

    cfg = _load_train_config(args.config, args.seed)
    manifest = load_manifest(args.manifest)
    ds = load_dataset(args.manifest)
    model = fit(
        ds,
        cfg,
        variant=args.variant,
        out_dir=args.out,
        view_names=[v.name for v in manifest.views],
    )
    s1 = model.history["stage1"]
    s2 = model.history["stage2"]
    msg = f"saved {args.variant} model to {args.out}"
    if s1:
        msg += f"; stage1 loss {s1[0]:.6f} -> {s1[-1]:.6f} over {len(s1)} epochs"
    if s2:
        msg += f"; stage2 loss {s2[0]:.6f} -> {s2[-1]:.6f} over {len(s2)} epochs"
    print(msg)
    return args.out


def _cmd_score(args):
    from .data import load_dataset, load_manifest
    from .errors import ManifestError
    from .scoring import score, write_scores
    from .trainer import load_model

    model = load_model(args.model)
    manifest = load_manifest(args.manifest)
    names = [v.name for v in manifest.views]
    if names != model.view_names:
        raise ManifestError(
            f"{args.manifest}: view names {names} do not match the model's "
            f"{model.view_names}"
        )
    ds = load_dataset(args.manifest)
    rows = score(model, ds)
    write_scores(args.out, rows, names)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return Path(args.out).resolve().parent


def _cmd_eval(args):
    from .errors import FormatError
    from .scoring import file_digest, metric_report, read_scores, write_metrics

    rows, _ = read_scores(args.scores)
    if args.labels:
        from .data import load_labels

        labels = [int(v) for v in load_labels(args.labels)]
        if len(labels) != len(rows):
            raise FormatError(
                f"{args.labels} has {len(labels)} labels, "
                f"{args.scores} has {len(rows)} rows"
            )
    else:
        if any(r.label is None for r in rows):
            raise FormatError(
                f"{args.scores} has no label column; pass --labels"
            )
        labels = [r.label for r in rows]
    rep = metric_report(
        [r.fused for r in rows],
        labels,
        variant=args.variant,
        seed=args.seed,
        digest=file_digest(args.scores),
    )
    write_metrics(args.out, rep)
    print(f"auroc {rep.auroc!r} auprc {rep.auprc!r} n_pos {rep.n_pos} n_neg {rep.n_neg}")
    return Path(args.out).resolve().parent


def _cmd_ablate(args):
    from dataclasses import replace
    from statistics import mean, stdev

    from .data import load_dataset
    from .scoring import ablate

    cfg0 = _load_train_config(args.config, args.seed)
    ds = load_dataset(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["variant,seed,auroc,auprc,n_pos,n_neg"]
    for variant in args.variants:
        aurocs = []
        for i in range(args.seeds):
            cfg = replace(cfg0, seed=cfg0.seed + i)
            rep = ablate(variant, ds, cfg)
            aurocs.append(rep.auroc)
            lines.append(
                f"{variant},{cfg.seed},{_fmt(rep.auroc)},{_fmt(rep.auprc)},"
                f"{rep.n_pos},{rep.n_neg}"
            )
        if len(aurocs) > 1:
            print(
                f"{variant}: auroc mean {mean(aurocs):.4f} "
                f"std {stdev(aurocs):.4f} over {len(aurocs)} seeds"
            )
        else:
            print(f"{variant}: auroc {aurocs[0]:.4f}")
    with open(out_dir / "ablation.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_dir


def _cmd_robustness(args):
    from .data import load_dataset
    from .scoring import robustness_sweep

    cfg = _load_train_config(args.config, args.seed)
    ds = load_dataset(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = robustness_sweep(ds, cfg, args.ratios)
    lines = ["ratio,auroc,auprc,n_pos,n_neg"]
    for ratio, rep in zip(args.ratios, reports):
        lines.append(
            f"{_fmt(ratio)},{_fmt(rep.auroc)},{_fmt(rep.auprc)},{rep.n_pos},{rep.n_neg}"
        )
        print(f"ratio {ratio:g}: auroc {rep.auroc:.4f}")
    with open(out_dir / "robustness.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_dir


def _cmd_sensitivity(args):
    from .data import load_dataset
    from .scoring import sensitivity_grid, write_sensitivity

    cfg = _load_train_config(args.config, args.seed)
    ds = load_dataset(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = sensitivity_grid(ds, cfg, args.alpha, args.beta)
    path = out_dir / "sensitivity.csv"
    write_sensitivity(path, args.alpha, args.beta, grid)
    print(
        f"wrote {path} ({len(args.alpha)}x{len(args.beta)} cells, "
        f"best auroc {grid.max():.4f})"
    )
    return out_dir


def _cmd_inspect_model(args):
    meta_path = Path(args.model) / "meta.json"
    if not meta_path.exists():
        raise ModelIncomplete(f"{meta_path} is missing")
    doc = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = doc["config"]
    print(f"model: {args.model}")
    print(f"variant: {doc['variant']}")
    views = ", ".join(
        f"{n}({d})" for n, d in zip(doc["view_names"], doc["view_dims"])
    )
    print(f"views ({len(doc['view_names'])}): {views}")
    hidden = " -> ".join(str(h) for h in cfg["encoder_hidden"])
    print(
        f"autoencoder per view: input -> {hidden} -> {cfg['latent_dim']} "
        "latent, decoder mirrored"
    )
    if doc["allocation_frozen"]:
        print("allocation: uniform 1/K (frozen)")
    else:
        print(f"allocation: learned, pca dim {doc['pca_dim']}")
    print(f"reference bank rows: {doc['bank_rows']}")
    s1 = doc["history"].get("stage1", [])
    s2 = doc["history"].get("stage2", [])
    print(f"training: stage1 {len(s1)} epochs, stage2 {len(s2)} epochs")
    for key in sorted(cfg):
        print(f"config {key} = {cfg[key]}")
    return None


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvad",
        description="Multi-view anomaly detection over embedding files.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "generate-synthetic", help="write a synthetic multi-view benchmark"
    )
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--views", type=parse_positive_int, default=3)
    p.add_argument("--dims", type=parse_positive_int, default=64,
                   help="dimensions per view")
    p.add_argument("--n-normal", type=parse_positive_int, default=1000)
    p.add_argument("--n-anomaly", type=int, default=50)
    p.add_argument("--latent-rank", type=parse_positive_int, default=8)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--mode", choices=("offmanifold", "viewswap", "mixed"),
                   default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate_synthetic)

    p = sub.add_parser("train", help="fit a model on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    p.add_argument("--variant", type=parse_variant, default="full")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score a manifest with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="score csv path")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="ranking metrics for a score csv")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", default=None,
                   help="label file; defaults to the csv's label column")
    p.add_argument("--out", required=True, help="metrics json path")
    p.add_argument("--variant", type=parse_variant, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variants", type=parse_variant_list,
                   default=["full", "no_aa", "no_cc", "no_ae"])
    p.add_argument("--seeds", type=parse_positive_int, default=5,
                   help="number of consecutive seeds")
    p.add_argument("--seed", type=int, default=None, help="base seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("robustness",
                       help="refit while injecting anomalies into training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ratios", type=parse_values,
                   default=[0.0, 0.02, 0.04, 0.06, 0.08, 0.10])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_robustness)

    p = sub.add_parser("sensitivity",
                       help="auroc grid over the fusion coefficients")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--alpha", type=parse_values, default=[1.0],
                   help="comma list or begin:end:step")
    p.add_argument("--beta", type=parse_values, default=[1.0],
                   help="comma list or begin:end:step")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sensitivity)

    p = sub.add_parser("inspect-model", help="print a model summary")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_inspect_model)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        log_dir = args.func(args)
        if log_dir is not None:
            _append_run_log(log_dir, args, time.perf_counter() - t0)
    except NumericDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (MvadError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
