"""Dataset loading, on-disk formats, one-class splitting, scaling, synthesis.

On-disk formats
---------------
Manifest (JSON)::

    {"views": [{"name": str, "dim": int, "path": str, "source_model": str}, ...],
     "labels": str | null,
     "ids": str | null,
     "metadata": {...}}          # optional free-form block

Paths are relative to the manifest file.

MVEB matrix file (little-endian, no padding, no trailer)::

    bytes 0-3    magic  b"MVEB"
    bytes 4-7    version (u32): 1 = float32 payload, 2 = float64 payload
    bytes 8-15   rows (u64)
    bytes 16-23  cols (u64)
    then rows*cols IEEE-754 floats, row-major

Version 1 is the canonical dataset format; version 2 exists so model
parameters can round-trip without losing float64 precision. CSV files are
also accepted for small hand-made fixtures (sniffed by the missing magic).

Labels file: one ASCII "0" or "1" per line. IDs file: one UTF-8 line per
sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    FormatError,
    InsufficientData,
    ManifestError,
)
from .linalg import make_rng

_MAGIC = b"MVEB"
_HEADER = struct.Struct("<4sIQQ")

# seed-derivation stream ids used by this module (see linalg.make_rng)
_STREAM_MIXING = 0
_STREAM_NORMAL_LATENT = 1
_STREAM_NORMAL_NOISE = 2
_STREAM_OFFMANIFOLD_LATENT = 3
_STREAM_ANOMALY_NOISE = 4
_STREAM_VIEWSWAP_LATENT = 5
_STREAM_SPLIT = 11


# ---------------------------------------------------------------------------
# matrix files


def write_matrix(path, M, dtype: str = "float32") -> None:
    """Write a matrix as an MVEB file (version 1 for float32, 2 for float64)."""
    M = np.ascontiguousarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise DimensionError(f"can only write 2-D matrices, got shape {M.shape}")
    if dtype == "float32":
        version, payload = 1, M.astype("<f4")
    elif dtype == "float64":
        version, payload = 2, M.astype("<f8")
    else:
        raise ConfigError(f"unsupported MVEB dtype {dtype!r}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, version, M.shape[0], M.shape[1]))
        f.write(payload.tobytes(order="C"))


def _load_mveb(path, raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated MVEB header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version == 1:
        dt = np.dtype("<f4")
    elif version == 2:
        dt = np.dtype("<f8")
    else:
        raise FormatError(f"{path}: unsupported MVEB version {version}")
    expected = _HEADER.size + rows * cols * dt.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} < {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype=dt, offset=_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)


def _load_csv(path, text: str) -> np.ndarray:
    rows = []
    width = None
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise FormatError(f"{path}:{ln}: ragged row ({len(cells)} != {width} cells)")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: non-numeric cell ({exc})") from None
    if not rows:
        raise FormatError(f"{path}: empty CSV matrix")
    return np.asarray(rows, dtype=np.float64)


def load_matrix(path) -> np.ndarray:
    """Load an MVEB or CSV matrix file as a float64 row-major array."""
    raw = Path(path).read_bytes()
    if raw[:4] == _MAGIC:
        M = _load_mveb(path, raw)
    else:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: neither MVEB nor text CSV") from None
        M = _load_csv(path, text)
    if not np.isfinite(M).all():
        raise FormatError(f"{path}: matrix contains NaN/Inf entries")
    return M


def read_matrix_shape(path) -> tuple[int, int]:
    """Read only the (rows, cols) of a matrix file; cheap for MVEB."""
    p = Path(path)
    with open(p, "rb") as f:
        head = f.read(_HEADER.size)
    if head[:4] == _MAGIC:
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated MVEB header")
        _, version, rows, cols = _HEADER.unpack(head)
        if version not in (1, 2):
            raise FormatError(f"{path}: unsupported MVEB version {version}")
        return int(rows), int(cols)
    return load_matrix(path).shape


# ---------------------------------------------------------------------------
# labels / ids


def load_labels(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    labels = np.empty(len(lines), dtype=np.int64)
    for i, line in enumerate(lines):
        if line == "0":
            labels[i] = 0
        elif line == "1":
            labels[i] = 1
        else:
            raise FormatError(f"{path}:{i + 1}: label must be '0' or '1', got {line!r}")
    return labels


def write_labels(path, labels) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for y in labels:
            f.write(f"{int(y)}\n")


def load_ids(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def write_ids(path, ids) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in ids:
            f.write(f"{s}\n")


# ---------------------------------------------------------------------------
# manifest and dataset


@dataclass(frozen=True)
class ViewSpec:
    """One embedding view: a named matrix file of a fixed dimension."""

    name: str
    dim: int
    path: str
    source_model: str = ""


@dataclass(frozen=True)
class Manifest:
    views: tuple[ViewSpec, ...]
    labels_path: str | None
    ids_path: str | None
    metadata: dict
    base_dir: Path


@dataclass
class MultiViewDataset:
    """K view matrices sharing sample order, plus optional binary labels."""

    views: list[np.ndarray]
    labels: np.ndarray | None = None
    sample_ids: list[str] | None = None

    def __post_init__(self):
        if len(self.views) < 2:
            raise ConfigError(f"multi-view data needs K >= 2 views, got {len(self.views)}")
        n = self.views[0].shape[0]
        for k, v in enumerate(self.views):
            if v.ndim != 2 or v.shape[0] != n:
                raise DimensionError(
                    f"view {k} has shape {v.shape}, expected {n} rows like view 0"
                )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise DimensionError(
                    f"labels have shape {self.labels.shape}, expected ({n},)"
                )
            if not np.isin(self.labels, (0, 1)).all():
                raise DimensionError("labels must contain only 0/1")
        if self.sample_ids is None:
            self.sample_ids = [f"s{i:06d}" for i in range(n)]
        elif len(self.sample_ids) != n:
            raise DimensionError(
                f"{len(self.sample_ids)} sample ids for {n} samples"
            )

    @property
    def n_samples(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(v.shape[1] for v in self.views)

    def select(self, indices) -> "MultiViewDataset":
        """Row subset in the given index order."""
        indices = np.asarray(indices, dtype=np.int64)
        return MultiViewDataset(
            views=[v[indices] for v in self.views],
            labels=None if self.labels is None else self.labels[indices],
            sample_ids=[self.sample_ids[i] for i in indices],
        )


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest, cross-checking dims against file headers."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    unknown = set(doc) - {"views", "labels", "ids", "metadata"}
    if unknown:
        raise ManifestError(f"{path}: unknown manifest keys {sorted(unknown)}")
    views_doc = doc.get("views")
    if not isinstance(views_doc, list) or len(views_doc) < 2:
        raise ManifestError(f"{path}: manifest needs a 'views' list with K >= 2 entries")

    base = path.parent
    views = []
    seen = set()
    for i, v in enumerate(views_doc):
        if not isinstance(v, dict):
            raise ManifestError(f"{path}: views[{i}] must be an object")
        for key in ("name", "dim", "path"):
            if key not in v:
                raise ManifestError(f"{path}: views[{i}] missing field {key!r}")
        spec = ViewSpec(
            name=str(v["name"]),
            dim=int(v["dim"]),
            path=str(v["path"]),
            source_model=str(v.get("source_model", "")),
        )
        if spec.dim < 1:
            raise ManifestError(f"{path}: view {spec.name!r} has dim {spec.dim} < 1")
        if spec.name in seen:
            raise ManifestError(f"{path}: duplicate view name {spec.name!r}")
        seen.add(spec.name)
        _, cols = read_matrix_shape(base / spec.path)
        if cols != spec.dim:
            raise ManifestError(
                f"{path}: view {spec.name!r} declares dim {spec.dim} "
                f"but {spec.path} has {cols} columns"
            )
        views.append(spec)

    return Manifest(
        views=tuple(views),
        labels_path=doc.get("labels"),
        ids_path=doc.get("ids"),
        metadata=doc.get("metadata", {}),
        base_dir=base,
    )


def load_dataset(manifest_path) -> MultiViewDataset:
    """Load all views (plus labels/ids when present) behind a manifest."""
    man = load_manifest(manifest_path)
    views = [load_matrix(man.base_dir / v.path) for v in man.views]
    n = views[0].shape[0]
    for spec, v in zip(man.views, views):
        if v.shape[0] != n:
            raise ManifestError(
                f"view {spec.name!r} has {v.shape[0]} rows, expected {n}"
            )
    labels = None
    if man.labels_path is not None:
        labels = load_labels(man.base_dir / man.labels_path)
        if len(labels) != n:
            raise ManifestError(f"{len(labels)} labels for {n} samples")
    ids = None
    if man.ids_path is not None:
        ids = load_ids(man.base_dir / man.ids_path)
        if len(ids) != n:
            raise ManifestError(f"{len(ids)} ids for {n} samples")
    return MultiViewDataset(views=views, labels=labels, sample_ids=ids)


def save_dataset(ds: MultiViewDataset, out_dir, view_names=None, source_models=None) -> Path:
    """Write views (MVEB v1), labels, ids and a manifest; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = view_names or [f"view{k}" for k in range(ds.n_views)]
    sources = source_models or ["" for _ in names]
    entries = []
    for name, source, V in zip(names, sources, ds.views):
        fname = f"{name}.mveb"
        write_matrix(out / fname, V)
        entries.append(
            {"name": name, "dim": V.shape[1], "path": fname, "source_model": source}
        )
    doc = {"views": entries, "labels": None, "ids": "ids.txt"}
    write_ids(out / "ids.txt", ds.sample_ids)
    if ds.labels is not None:
        write_labels(out / "labels.txt", ds.labels)
        doc["labels"] = "labels.txt"
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# one-class split


@dataclass(frozen=True)
class SplitSpec:
    """Seeded one-class split: train on a fraction of the normal samples.

    ``injected_anomaly_ratio`` contaminates the training set with
    floor(ratio * train_size) anomalies drawn without replacement from the
    anomaly pool and removed from the test set.
    """

    train_fraction_of_normals: float = 0.70
    seed: int = 0
    injected_anomaly_ratio: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.train_fraction_of_normals < 1.0):
            raise ConfigError("train_fraction_of_normals must lie in (0, 1)")
        if not (0.0 <= self.injected_anomaly_ratio <= 0.5):
            raise ConfigError("injected_anomaly_ratio must lie in [0, 0.5]")


def one_class_split(
    ds: MultiViewDataset, spec: SplitSpec = SplitSpec()
) -> tuple[MultiViewDataset, MultiViewDataset]:
    """Split into (train, test): train is a seeded random fraction of normals,
    test is everything else. Sample order follows the original dataset."""
    if ds.labels is None:
        raise ConfigError("one_class_split needs labels")
    normals = np.flatnonzero(ds.labels == 0)
    anomalies = np.flatnonzero(ds.labels == 1)
    if len(normals) < 10:
        raise InsufficientData(f"need at least 10 normal samples, got {len(normals)}")

    rng = make_rng(spec.seed, _STREAM_SPLIT)
    norm_perm = rng.permutation(normals)
    n_train = int(spec.train_fraction_of_normals * len(normals))
    train_normals = norm_perm[:n_train]

    n_inject = int(spec.injected_anomaly_ratio * n_train)
    if n_inject > len(anomalies):
        raise InsufficientData(
            f"anomaly pool of {len(anomalies)} cannot supply {n_inject} injected samples"
        )
    anom_perm = rng.permutation(anomalies) if len(anomalies) else anomalies
    injected = anom_perm[:n_inject]

    train_idx = np.sort(np.concatenate([train_normals, injected]))
    test_idx = np.sort(np.concatenate([norm_perm[n_train:], anom_perm[n_inject:]]))
    return ds.select(train_idx), ds.select(test_idx)


# ---------------------------------------------------------------------------
# min-max scaling


@dataclass
class MinMaxScaler:
    """Per-view, per-dimension min-max mapping onto [0, 1], fit on train only.

    Needed because the decoder output activation is a sigmoid while raw
    embeddings are unbounded. Constant dimensions map to 0.5; unseen values
    are clamped to [0, 1] at transform time.
    """

    mins: list[np.ndarray]
    maxs: list[np.ndarray]


def fit_scaler(train: MultiViewDataset) -> MinMaxScaler:
    if train.n_samples == 0:
        raise InsufficientData("cannot fit a scaler on an empty dataset")
    return MinMaxScaler(
        mins=[v.min(axis=0) for v in train.views],
        maxs=[v.max(axis=0) for v in train.views],
    )


def apply_scaler(scaler: MinMaxScaler, ds: MultiViewDataset) -> MultiViewDataset:
    scaled = []
    for V, lo, hi in zip(ds.views, scaler.mins, scaler.maxs):
        if V.shape[1] != lo.shape[0]:
            raise DimensionError(
                f"view has {V.shape[1]} dims, scaler expects {lo.shape[0]}"
            )
        span = hi - lo
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (V - lo) / span
        out = np.where(span > 0, out, 0.5)
        scaled.append(np.clip(out, 0.0, 1.0))
    return MultiViewDataset(views=scaled, labels=ds.labels, sample_ids=list(ds.sample_ids))


# ---------------------------------------------------------------------------
# synthetic benchmark generator


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale multi-view generator with a shared low-rank latent.

    Normal samples share one latent u ~ N(0, I_r) across views; view k
    observes ``A_k u + eps`` with fixed seeded mixing A_k (entries
    N(0,1)/sqrt(r)) and noise eps ~ N(0, noise^2). Anomaly modes:

    * ``offmanifold``: every view gets its own independent latent scaled by 3
    * ``viewswap``: every view gets its own independent latent (unit scale),
      so each view's marginal matches the normals but cross-view consistency
      is broken
    * ``mixed``: first half offmanifold (rounding up), rest viewswap

    ``dims`` and ``noise`` accept a scalar applied to every view or one value
    per view.
    """

    n_views: int = 3
    dims: int | tuple[int, ...] = 64
    n_normal: int = 1000
    n_anomaly: int = 50
    latent_rank: int = 8
    noise: float | tuple[float, ...] = 0.05
    anomaly_mode: str = "mixed"
    seed: int = 0

    def view_dims(self) -> tuple[int, ...]:
        d = self.dims
        return tuple(d) if isinstance(d, (tuple, list)) else (int(d),) * self.n_views

    def view_noise(self) -> tuple[float, ...]:
        s = self.noise
        return tuple(s) if isinstance(s, (tuple, list)) else (float(s),) * self.n_views


@dataclass(frozen=True)
class SynthDetails:
    """Generation internals for oracle tests: mixing matrices and the latent
    each view actually used, aligned with the dataset rows."""

    mixing: list[np.ndarray]
    latents: list[np.ndarray]


def generate_synthetic(cfg: SynthConfig, with_details: bool = False):
    """Generate a labeled multi-view dataset (normals first, then anomalies)."""
    if cfg.n_views < 2:
        raise ConfigError(f"n_views must be >= 2, got {cfg.n_views}")
    if cfg.n_normal < 1 or cfg.n_anomaly < 1:
        raise ConfigError("n_normal and n_anomaly must be positive")
    if cfg.latent_rank < 1:
        raise ConfigError("latent_rank must be >= 1")
    dims = cfg.view_dims()
    noise = cfg.view_noise()
    if len(dims) != cfg.n_views or len(noise) != cfg.n_views:
        raise ConfigError("dims/noise must be scalar or give one value per view")
    if any(d < 1 for d in dims):
        raise ConfigError("view dims must be positive")
    if any(s < 0 for s in noise):
        raise ConfigError("noise must be >= 0")
    if cfg.anomaly_mode not in ("offmanifold", "viewswap", "mixed"):
        raise ConfigError(f"unknown anomaly_mode {cfg.anomaly_mode!r}")

    r = cfg.latent_rank
    mixing = [
        make_rng(cfg.seed, _STREAM_MIXING, k).standard_normal((dims[k], r)) / np.sqrt(r)
        for k in range(cfg.n_views)
    ]

    u_normal = make_rng(cfg.seed, _STREAM_NORMAL_LATENT).standard_normal((cfg.n_normal, r))

    if cfg.anomaly_mode == "mixed":
        n_off = (cfg.n_anomaly + 1) // 2
    elif cfg.anomaly_mode == "offmanifold":
        n_off = cfg.n_anomaly
    else:
        n_off = 0
    n_swap = cfg.n_anomaly - n_off

    views, latents = [], []
    for k in range(cfg.n_views):
        u_off = 3.0 * make_rng(cfg.seed, _STREAM_OFFMANIFOLD_LATENT, k).standard_normal((n_off, r))
        u_swap = make_rng(cfg.seed, _STREAM_VIEWSWAP_LATENT, k).standard_normal((n_swap, r))
        u_k = np.concatenate([u_normal, u_off, u_swap], axis=0)
        clean = u_k @ mixing[k].T
        eps = np.zeros_like(clean)
        if noise[k] > 0:
            eps[: cfg.n_normal] = noise[k] * make_rng(
                cfg.seed, _STREAM_NORMAL_NOISE, k
            ).standard_normal((cfg.n_normal, dims[k]))
            eps[cfg.n_normal :] = noise[k] * make_rng(
                cfg.seed, _STREAM_ANOMALY_NOISE, k
            ).standard_normal((cfg.n_anomaly, dims[k]))
        views.append(clean + eps)
        latents.append(u_k)

    labels = np.concatenate(
        [np.zeros(cfg.n_normal, dtype=np.int64), np.ones(cfg.n_anomaly, dtype=np.int64)]
    )
    ids = [f"n{i:06d}" for i in range(cfg.n_normal)] + [
        f"a{i:06d}" for i in range(cfg.n_anomaly)
    ]
    ds = MultiViewDataset(views=views, labels=labels, sample_ids=ids)
    if with_details:
        return ds, SynthDetails(mixing=mixing, latents=latents)
    return ds
